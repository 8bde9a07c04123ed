"""Robust image watermarking with cross-attention embedding and a learned noise-invariant domain."""

from invmark.errors import (
    CheckpointError,
    ConfigError,
    DomainError,
    NumericError,
    ShapeError,
)
from invmark.tensor_core import ModelConfig

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DomainError",
    "ModelConfig",
    "NumericError",
    "ShapeError",
]
