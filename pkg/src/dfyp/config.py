"""Run configuration: published presets plus every tunable decision, as flat key=value text."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

VARIANTS = ("cnn", "vit", "fusion", "fusion+rca", "fusion+aol", "full")
OPERATORS = ("aol", "sobel", "canny", "kirsch", "laplacian", "log", "prewitt", "roberts", "scharr")


@dataclass
class ModelConfig:
    preset: str = "toy"
    variant: str = "full"
    operator: str = "aol"
    seed: int = 0

    # input
    in_channels: int = 9
    image_size: int = 32
    gsd_m: float = 500.0
    gsd_threshold_m: float = 100.0

    # CNN branch ("in" is implied by in_channels)
    cnn_channels: tuple[int, ...] = (16, 32)
    cnn_strides: tuple[int, ...] = (2, 2)
    kernel_size: int = 3
    dropout: float = 0.1

    # ViT branch
    patch_size: int = 8
    vit_depth: int = 2
    vit_heads: int = 2
    vit_dim: int = 16
    vit_mlp: int = 32

    # RCA, AOL and fusion initialisation
    rca_reduction: int = 4
    gamma_raw_init: float = 0.0
    lambda_raw_init: float = 0.0
    alpha_raw_init: float = 0.0
    beta_raw_init: float = 0.0
    gate_warmup: int = 3
    canny_sigma: float = 1.0
    canny_low: float = 0.1
    canny_high: float = 0.2

    # optimisation
    lr: float = 1e-3
    batch_size: int = 32
    max_steps: int = 25_000
    epochs: int = 50
    patience: int = 10
    standardize_inputs: bool = False
    standardize_targets: bool = True

    # histogram preprocessing
    hist_bins: int = 32
    hist_steps: int = 32
    range_trim: float = 0.01

    def __post_init__(self):
        self.cnn_channels = tuple(int(c) for c in self.cnn_channels)
        self.cnn_strides = tuple(int(s) for s in self.cnn_strides)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.operator not in OPERATORS:
            raise ConfigError(f"unknown operator {self.operator!r}; expected one of {OPERATORS}")
        if len(self.cnn_strides) != len(self.cnn_channels):
            raise ConfigError("cnn_strides needs one entry per cnn_channels entry")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size and patience must be positive, epochs non-negative")
        if not self.canny_low < self.canny_high:
            raise ConfigError("canny_low must be below canny_high")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


PRESETS: dict[str, dict] = {
    # MODIS histogram inputs, 9 x 32 x 32
    "modis": dict(
        preset="modis",
        in_channels=9,
        image_size=32,
        gsd_m=500.0,
        cnn_channels=(128, 256, 256, 512, 512, 512),
        cnn_strides=(1, 2, 1, 2, 1, 2),
        patch_size=4,
        vit_depth=4,
        vit_heads=8,
        vit_dim=256,
        vit_mlp=512,
        lr=1e-4,
        batch_size=64,
        max_steps=25_000,
        epochs=100_000,
    ),
    # Sentinel-2 tiles, 3 x 256 x 256
    "sentinel2": dict(
        preset="sentinel2",
        in_channels=3,
        image_size=256,
        gsd_m=10.0,
        cnn_channels=(32, 64, 128, 128),
        cnn_strides=(2, 2, 2, 1),
        patch_size=16,
        vit_depth=6,
        vit_heads=6,
        vit_dim=128,
        vit_mlp=256,
        lr=1e-4,
        batch_size=16,
        max_steps=25_000,
        epochs=100_000,
    ),
    # desk-scale preset for CI-speed runs on 9 x 32 x 32 histogram inputs
    "toy": dict(preset="toy"),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    values = dict(PRESETS[name])
    values.update(overrides)
    return ModelConfig(**values)


_FIELDS = {f.name: f for f in fields(ModelConfig)}


def _parse_value(name: str, raw: str):
    default = ModelConfig.__dataclass_fields__[name].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            body = raw.strip("[]() ")
            return tuple(int(v) for v in body.split(",") if v.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw


def parse_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def resolve(text: str = "", preset_name: str | None = None, **overrides) -> ModelConfig:
    """Preset (from argument, file, or 'toy'), then file values, then overrides."""
    values = parse_text(text)
    name = preset_name or values.get("preset") or "toy"
    if preset_name and values.get("preset") and values["preset"] != preset_name:
        # an explicit --preset wins over the file's preset line
        values.pop("preset")
    for key in overrides:
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
    base = dict(PRESETS.get(name, {}))
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    base.update(values)
    base.update({k: v for k, v in overrides.items() if v is not None})
    base["preset"] = name
    return ModelConfig(**base)


def load(path, **overrides) -> ModelConfig:
    return resolve(Path(path).read_text(), **overrides)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_text(cfg: ModelConfig) -> str:
    """Fully resolved snapshot; feeding it back to :func:`resolve` reproduces ``cfg``."""
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"
