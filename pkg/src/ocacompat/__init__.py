"""Backward-compatible embedding training with a discardable orthogonal layer."""
from .exceptions import (
    ConfigError,
    NumericError,
    OCAError,
    ParseError,
    StructuralError,
    UnsupportedVersionError,
    UsageError,
)
from .trainer import CompatibleEmbedder, ModelBundle, Prototypes, TrainConfig

__all__ = [
    "CompatibleEmbedder",
    "ConfigError",
    "ModelBundle",
    "NumericError",
    "OCAError",
    "ParseError",
    "Prototypes",
    "StructuralError",
    "TrainConfig",
    "UnsupportedVersionError",
    "UsageError",
]
__version__ = "0.1.0"
