"""DFYP assembly: RCA -> {CNN branch, ViT branch} -> learnable weighted fusion."""
from __future__ import annotations

import numpy as np

from .backbone import BackboneConfig, CNNBranch
from .config import ModelConfig
from .edge_ops import PipelineOperator
from .errors import ConfigError
from .nn import Module, parameter
from .rca import RCA, ResolutionClass
from .tensor import Tensor, add, mul, sigmoid
from .vit import ViT, ViTConfig

# variant -> (cnn, vit, rca, aol)
VARIANT_PARTS = {
    "cnn": (True, False, False, False),
    "vit": (False, True, False, False),
    "fusion": (True, True, False, False),
    "fusion+rca": (True, True, True, False),
    "fusion+aol": (True, True, False, True),
    "full": (True, True, True, True),
}


class FusionParams(Module):
    """alpha = sigmoid(a_raw), beta = sigmoid(b_raw); no sum-to-one constraint."""

    def __init__(self, a_raw: float = 0.0, b_raw: float = 0.0):
        self.a_raw = parameter([a_raw])
        self.b_raw = parameter([b_raw])

    @property
    def alpha(self) -> float:
        return float(1.0 / (1.0 + np.exp(-float(self.a_raw.data[0]))))

    @property
    def beta(self) -> float:
        return float(1.0 / (1.0 + np.exp(-float(self.b_raw.data[0]))))


def fuse(y1, y2, p: FusionParams) -> Tensor:
    return add(mul(sigmoid(p.a_raw), y1), mul(sigmoid(p.b_raw), y2))


def backbone_config(cfg: ModelConfig) -> BackboneConfig:
    return BackboneConfig(
        channels=(cfg.in_channels,) + tuple(cfg.cnn_channels),
        strides=cfg.cnn_strides,
        kernel_size=cfg.kernel_size,
        dropout=cfg.dropout,
        gamma_raw=cfg.gamma_raw_init,
    )


def vit_config(cfg: ModelConfig) -> ViTConfig:
    return ViTConfig(
        image_size=cfg.image_size,
        patch_size=cfg.patch_size,
        depth=cfg.vit_depth,
        heads=cfg.vit_heads,
        dim=cfg.vit_dim,
        mlp_dim=cfg.vit_mlp,
        in_channels=cfg.in_channels,
    )


class DFYP(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.variant = cfg.variant
        use_cnn, use_vit, use_rca, use_aol = VARIANT_PARTS[cfg.variant]
        if cfg.operator != "aol" and not use_aol:
            raise ConfigError(f"variant {cfg.variant!r} has no edge path to pin operator {cfg.operator!r} on")
        self.resolution = ResolutionClass.from_gsd(cfg.gsd_m, cfg.gsd_threshold_m)
        self.rca = RCA(cfg.in_channels, self.resolution, rng, cfg.rca_reduction) if use_rca else None
        self.cnn = CNNBranch(backbone_config(cfg), rng, use_aol=use_aol, lambda_raw=cfg.lambda_raw_init) if use_cnn else None
        self.vit = ViT(vit_config(cfg), rng) if use_vit else None
        self.fusion = FusionParams(cfg.alpha_raw_init, cfg.beta_raw_init) if use_cnn and use_vit else None
        if self.edge is not None:
            self.edge._classical["canny"] = PipelineOperator(sigma=cfg.canny_sigma, low=cfg.canny_low, high=cfg.canny_high)
            self.edge.select("sobel" if cfg.operator == "aol" else cfg.operator)
        if use_cnn:
            backbone_config(cfg).output_size(cfg.image_size, cfg.image_size)

    @property
    def edge(self):
        return self.cnn.edge if self.cnn is not None else None

    @property
    def uses_gate(self) -> bool:
        return self.edge is not None and self.cfg.operator == "aol"

    def set_operator(self, op_id: str) -> None:
        if self.edge is None:
            raise ConfigError(f"variant {self.variant!r} has no adaptive edge operator")
        self.edge.select(op_id)

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if self.rca is not None:
            x = self.rca(x)
        y1 = self.cnn(x, rng) if self.cnn is not None else None
        y2 = self.vit(x) if self.vit is not None else None
        if self.fusion is not None:
            return fuse(y1, y2, self.fusion)
        return y1 if y1 is not None else y2

    def coefficients(self) -> dict[str, float]:
        """Current alpha/beta/gamma/lambda, only for the parts this variant has."""
        out = {}
        if self.fusion is not None:
            out["alpha"] = self.fusion.alpha
            out["beta"] = self.fusion.beta
        if self.edge is not None:
            out["gamma"] = self.edge.gamma
            out["lambda"] = self.edge.learnable.lam
        return out


def build_model(cfg: ModelConfig) -> DFYP:
    return DFYP(cfg, np.random.default_rng(cfg.seed))
