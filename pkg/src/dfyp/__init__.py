"""Dual-branch CNN/ViT crop-yield regression on a small numpy autodiff engine."""
from .config import ModelConfig, preset
from .errors import (
    ConfigError,
    ContractError,
    DFYPError,
    DimensionError,
    LoadError,
    NumericError,
    ParameterError,
    UnusableTileError,
)
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DFYPError",
    "DimensionError",
    "LoadError",
    "ModelConfig",
    "NumericError",
    "ParameterError",
    "Tensor",
    "UnusableTileError",
    "no_grad",
    "preset",
]
