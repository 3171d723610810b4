"""Latent-embedding zero-shot classification: a piecewise-linear compatibility
model over image and class embeddings, trained with ranking-loss SGD."""

from .data import (
    ClassSet,
    ImageSet,
    NormStats,
    ZeroShotSplit,
)
from .errors import FormatError, LatemError, NumericError, ValidationError
from .model import LatentModel, ScoredChoice
from .selection import PruneConfig
from .synthesis import PlantedSpec, PlantedTruth
from .trainer import TrainConfig, UpdateEvent

__version__ = "0.1.0"

__all__ = [
    "ClassSet",
    "FormatError",
    "ImageSet",
    "LatemError",
    "LatentModel",
    "NormStats",
    "NumericError",
    "PlantedSpec",
    "PlantedTruth",
    "PruneConfig",
    "ScoredChoice",
    "TrainConfig",
    "UpdateEvent",
    "ValidationError",
    "ZeroShotSplit",
]
