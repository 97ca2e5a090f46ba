"""protohead: a self-explainable prototypical classification head that trains
on frozen-backbone patch embeddings and ships with a quantitative
interpretability benchmark."""

from .dataio import (
    Checkpoint,
    EmbeddingBundle,
    load_checkpoint,
    read_bundle,
    save_checkpoint,
    write_bundle,
)
from .head import HeadConfig, HeadParams, infer_batch, init_params
from .losses import AlignmentConfig, LossWeights
from .synth import AugmentConfig, SynthConfig, generate_dataset, make_views, perturb
from .train import TrainConfig, evaluate, fit, params_from_checkpoint

__all__ = [
    "AlignmentConfig",
    "AugmentConfig",
    "Checkpoint",
    "EmbeddingBundle",
    "HeadConfig",
    "HeadParams",
    "LossWeights",
    "SynthConfig",
    "TrainConfig",
    "evaluate",
    "fit",
    "generate_dataset",
    "infer_batch",
    "init_params",
    "load_checkpoint",
    "make_views",
    "params_from_checkpoint",
    "perturb",
    "read_bundle",
    "save_checkpoint",
    "write_bundle",
]

__version__ = "0.1.0"
