"""Resolution-aware channel attention (squeeze, excitation, reweighting)."""
from __future__ import annotations

import enum
import math

import numpy as np

from . import functional as F
from .errors import DimensionError
from .nn import Linear, Module
from .tensor import Tensor, mul, relu, reshape, sigmoid

GSD_THRESHOLD_M = 100.0


class ResolutionClass(enum.Enum):
    LOW = "low"
    HIGH = "high"

    @classmethod
    def from_gsd(cls, gsd_m: float, threshold_m: float = GSD_THRESHOLD_M) -> "ResolutionClass":
        """Coarser than the threshold (e.g. MODIS at 500 m) is LOW."""
        return cls.LOW if gsd_m >= threshold_m else cls.HIGH


def squeeze(x: Tensor, res: ResolutionClass) -> Tensor:
    """Per-channel descriptor: global max for LOW, global mean for HIGH.

    Returns (N, C) for a batch or (C,) for a single image.
    """
    single = x.ndim == 3
    z = F.pool2d(x, "max" if res is ResolutionClass.LOW else "avg", "global")
    return reshape(z, (z.shape[0],) if single else z.shape[:2])


class RcaParams(Module):
    """Two-layer excitation MLP, C -> ceil(C/r) -> C."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        self.channels = channels
        self.reduction = reduction
        self.hidden = max(1, math.ceil(channels / reduction))
        self.fc1 = Linear(channels, self.hidden, rng)
        self.fc2 = Linear(self.hidden, channels, rng)


def excite(z: Tensor, p: RcaParams) -> Tensor:
    if z.shape[-1] != p.channels:
        raise DimensionError(f"excite: descriptor has {z.shape[-1]} channels, params expect {p.channels}")
    return sigmoid(p.fc2(relu(p.fc1(z))))


def reweight(x: Tensor, s: Tensor) -> Tensor:
    if s.shape[-1] != x.shape[-3]:
        raise DimensionError(f"reweight: {s.shape[-1]} scores for {x.shape[-3]} channels")
    return mul(x, reshape(s, s.shape + (1, 1)))


def rca_forward(x: Tensor, res: ResolutionClass, p: RcaParams) -> Tensor:
    return reweight(x, excite(squeeze(x, res), p))


class RCA(Module):
    def __init__(self, channels: int, resolution: ResolutionClass, rng: np.random.Generator, reduction: int = 4):
        self.resolution = resolution
        self.params = RcaParams(channels, reduction, rng)

    def forward(self, x: Tensor) -> Tensor:
        return rca_forward(x, self.resolution, self.params)
