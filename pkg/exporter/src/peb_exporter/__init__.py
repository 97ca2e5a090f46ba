"""peb_exporter: frozen-backbone patch-embedding export to PEB v1 bundles."""

from .backbones import BackboneLoadError, SeededRandomPatchNet, load_backbone
from .export import AugmentSpec, ExportManifest, export
from .peb import write_peb

__all__ = [
    "AugmentSpec",
    "BackboneLoadError",
    "ExportManifest",
    "SeededRandomPatchNet",
    "export",
    "load_backbone",
    "write_peb",
]

__version__ = "0.1.0"
