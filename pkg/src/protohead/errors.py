"""Exception types shared across the package."""


class ProtoHeadError(Exception):
    """Base class for all package errors."""


class ConfigError(ProtoHeadError):
    """Invalid configuration value or unknown configuration key."""


class ShapeMismatch(ProtoHeadError):
    """Tensor shapes inconsistent with the declared contract."""


class ZeroNormRow(ProtoHeadError):
    """A row fed to a cosine kernel has norm below 1e-12."""


class NonPositiveTemperature(ProtoHeadError):
    """Softmax temperature must be strictly positive."""


class KOutOfRange(ProtoHeadError):
    """top-k parameter outside [1, len(v)]."""


class NonFiniteValue(ProtoHeadError):
    """NaN or Inf encountered at a module boundary."""


class NonFiniteLoss(ProtoHeadError):
    """A loss term evaluated to NaN or Inf."""


class NonFiniteTerm(NonFiniteLoss):
    """A term passed to the total objective is not finite."""


class IoFailure(ProtoHeadError):
    """File could not be read or written."""


class InvariantViolation(ProtoHeadError):
    """Data structure violates one of its declared invariants."""


class BadMagic(ProtoHeadError):
    """File does not start with the expected magic bytes."""


class VersionMismatch(ProtoHeadError):
    """File declares an unsupported format version."""


class TruncatedFile(ProtoHeadError):
    """File ends before the declared payload is complete."""


class EmptyOverlap(ProtoHeadError):
    """Two view rectangles do not intersect with positive area."""


class OverlapTooSmall(ProtoHeadError):
    """Rejection sampling failed to produce sufficiently overlapping crops."""


class InfeasibleLayout(ProtoHeadError):
    """Part rectangles cannot be placed on the grid without overlap."""


class BatchTooSmall(ProtoHeadError):
    """The inter-sample loss needs at least two samples per batch."""


class LabelOutOfRange(ProtoHeadError):
    """Class label is not in [0, num_classes)."""


class CategoryAbsent(ProtoHeadError):
    """Requested part category has no patch in the sample."""


class NoActivePrototypes(ProtoHeadError):
    """No prototype is ever active, so the metric is undefined."""


class BackboneLoadError(ProtoHeadError):
    """A requested feature backbone could not be loaded."""
