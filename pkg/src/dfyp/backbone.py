"""CNN branch: edge modulation followed by a conv stack and a linear head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .edge_ops import CLASSICAL, POOL, EdgeOperator, LearnableKernel, apply_operator, classical_kernels
from .errors import ConfigError, DimensionError, ParameterError
from .nn import BatchNorm, Conv2d, Linear, Module, parameter
from .tensor import Tensor, add, mul, relu, reshape, sigmoid, sub


@dataclass
class BackboneConfig:
    channels: tuple[int, ...]  # input channels first, as in "[in, 128, 256, ...]"
    strides: tuple[int, ...]
    kernel_size: int = 3
    dropout: float = 0.1
    gamma_raw: float = 0.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.strides) != len(self.channels) - 1:
            raise ConfigError(
                f"need one stride per conv layer: {len(self.channels) - 1} layers, {len(self.strides)} strides"
            )
        if any(c < 1 for c in self.channels) or any(s < 1 for s in self.strides):
            raise ConfigError("channel widths and strides must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        """Spatial extent after every block; raises if it collapses below 1x1."""
        pad = self.kernel_size // 2
        for i, s in enumerate(self.strides):
            h = (h + 2 * pad - self.kernel_size) // s + 1
            w = (w + 2 * pad - self.kernel_size) // s + 1
            if h < 1 or w < 1:
                raise ConfigError(f"spatial extent collapses below 1x1 at conv layer {i + 1}")
        return h, w

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]


def edge_modulate(x: Tensor, g: Tensor, gamma) -> Tensor:
    """gamma * x + (1 - gamma) * g, with gamma a float or a scalar Tensor."""
    if x.shape != g.shape:
        raise DimensionError(f"edge_modulate: x {x.shape} and edge map {g.shape} differ")
    if isinstance(gamma, Tensor):
        return add(mul(x, gamma), mul(g, sub(1.0, gamma)))
    if not 0.0 <= gamma <= 1.0:
        raise ParameterError(f"gamma must lie in [0, 1], got {gamma}")
    return add(mul(x, float(gamma)), mul(g, 1.0 - float(gamma)))


class AdaptiveEdge(Module):
    """Holds gamma, the learnable stencil and the currently selected operator.

    ``gamma_pin`` / ``lambda_pin`` override the learned coefficients with
    exact values (used to check the endpoint behaviour).
    """

    def __init__(self, gamma_raw: float = 0.0, lambda_raw: float = 0.0, operator: str = "sobel"):
        self.gamma_raw = parameter([gamma_raw])
        self.learnable = LearnableKernel(lambda_raw)
        self._classical = classical_kernels()
        self.gamma_pin: float | None = None
        self.lambda_pin: float | None = None
        self.select(operator)

    def select(self, op_id: str) -> None:
        if op_id not in POOL and op_id not in CLASSICAL:
            raise ParameterError(f"unknown edge operator {op_id!r}")
        self.operator = op_id

    @property
    def gamma(self) -> float:
        return float(1.0 / (1.0 + np.exp(-float(self.gamma_raw.data[0]))))

    def current(self) -> EdgeOperator:
        if self.operator == "learnable":
            return self.learnable.kernel(self.lambda_pin)
        return self._classical[self.operator]

    def edge_map(self, x: Tensor) -> Tensor:
        return apply_operator(x, self.current())

    def forward(self, x: Tensor) -> Tensor:
        g = self.edge_map(x)
        gamma = self.gamma_pin if self.gamma_pin is not None else sigmoid(self.gamma_raw)
        return edge_modulate(x, g, gamma)


class ConvBlock(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int, dropout: float, rng):
        self.conv = Conv2d(c_in, c_out, k, rng, stride=stride, padding=k // 2)
        self.bn = BatchNorm(c_out)
        self.dropout = dropout

    def forward(self, x: Tensor, rng=None) -> Tensor:
        y = relu(self.bn(self.conv(x)))
        return F.dropout(y, self.dropout, self.training, rng)


class Backbone(Module):
    """conv -> batchnorm -> ReLU -> dropout blocks, then global average pooling."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        ch = cfg.channels
        self.blocks = [
            ConvBlock(ch[i], ch[i + 1], cfg.kernel_size, cfg.strides[i], cfg.dropout, rng) for i in range(len(cfg.strides))
        ]

    def forward(self, x: Tensor, rng=None) -> Tensor:
        self.cfg.output_size(*x.shape[-2:])
        for block in self.blocks:
            x = block(x, rng)
        pooled = F.pool2d(x, "avg", "global")
        return reshape(pooled, pooled.shape[:-2])


def backbone_forward(x: Tensor, backbone: Backbone, training: bool, rng=None) -> Tensor:
    backbone.train(training)
    return backbone(x, rng)


def cnn_head(features: Tensor, head: Linear) -> Tensor:
    if features.shape[-1] != head.weight.shape[0]:
        raise DimensionError(f"cnn_head: {features.shape[-1]} features, head expects {head.weight.shape[0]}")
    out = head(features)
    return reshape(out, out.shape[:-1])


class CNNBranch(Module):
    """Optional adaptive edge modulation, backbone and regression head."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, use_aol: bool = True, lambda_raw: float = 0.0):
        self.edge = AdaptiveEdge(cfg.gamma_raw, lambda_raw) if use_aol else None
        self.backbone = Backbone(cfg, rng)
        self.head = Linear(cfg.feature_dim, 1, rng)

    def forward(self, x: Tensor, rng=None) -> Tensor:
        if self.edge is not None:
            x = self.edge(x)
        return cnn_head(self.backbone(x, rng), self.head)
