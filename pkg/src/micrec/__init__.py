"""micrec: inductive, multimodal, cross-domain top-N recommendation."""

from .encoder import EncoderConfig, ModelParams
from .graph import DomainGraph, OverlapMap, SplitBundle
from .objective import LossWeights
from .trainer import TrainConfig

__all__ = [
    "DomainGraph",
    "EncoderConfig",
    "LossWeights",
    "ModelParams",
    "OverlapMap",
    "SplitBundle",
    "TrainConfig",
]

__version__ = "0.1.0"
