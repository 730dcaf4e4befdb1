"""Annual band stacking, land-cover masking, channel combination and histograms.

Masked-out pixels carry NaN as the sentinel value; every consumer excludes
them through ``np.isnan``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import DimensionError, ParameterError, UnusableTileError

REFLECTANCE_BANDS = 7
TEMPERATURE_BANDS = 2
SENTINEL = np.nan


def bands_per_year(n_channels: int, interval_days: int) -> int:
    """Number of stacked bands per year: N * floor(365 / M)."""
    if int(n_channels) != n_channels or int(interval_days) != interval_days:
        raise ParameterError("channel count and interval must be integers")
    if n_channels < 1 or interval_days < 1:
        raise ParameterError(f"need N >= 1 and M >= 1, got N={n_channels}, M={interval_days}")
    return int(n_channels) * (365 // int(interval_days))


@dataclass
class SpectralStack:
    """Per-time-step multichannel tile, shape (T, C, H, W).

    ``bands`` flattens it to the (T*C, H, W) stacked-band view.
    """

    data: np.ndarray
    year: int = 0
    gsd_m: float = 500.0
    band_groups: tuple[str, ...] = ()
    valid: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.data.ndim != 4:
            raise DimensionError(f"SpectralStack needs (T, C, H, W), got {self.data.shape}")

    @property
    def bands(self) -> np.ndarray:
        t, c, h, w = self.data.shape
        return self.data.reshape(t * c, h, w)

    @property
    def n_bands(self) -> int:
        return self.data.shape[0] * self.data.shape[1]

    @property
    def valid_pixels(self) -> int:
        if self.valid is None:
            return self.data.shape[2] * self.data.shape[3]
        return int(self.valid.sum())


@dataclass
class CoverMask:
    mask: np.ndarray  # (H, W) uint8 in {0, 1}

    @property
    def usable(self) -> bool:
        return bool(self.mask.any())


def build_mask(landcover: np.ndarray, crop_classes) -> CoverMask:
    """1 where the land-cover code is one of ``crop_classes``, else 0."""
    codes = np.asarray(landcover)
    classes = np.asarray(sorted(crop_classes), dtype=codes.dtype if codes.dtype.kind in "iu" else float)
    return CoverMask(np.isin(codes, classes).astype(np.uint8))


def apply_mask(stack: SpectralStack, mask: CoverMask) -> SpectralStack:
    if mask.mask.shape != stack.data.shape[2:]:
        raise DimensionError(f"mask {mask.mask.shape} does not match tile {stack.data.shape[2:]}")
    keep = mask.mask.astype(bool)
    if stack.valid is not None:
        keep = keep & stack.valid
    data = np.where(keep, stack.data, SENTINEL)
    return replace(stack, data=data, valid=keep)


def combine_channels(reflectance: np.ndarray, temperature: np.ndarray, **meta) -> SpectralStack:
    """Stack 7 reflectance then 2 temperature bands per time step -> (T, 9, H, W)."""
    refl = np.asarray(reflectance, dtype=np.float64)
    temp = np.asarray(temperature, dtype=np.float64)
    if refl.ndim == 3:
        refl = refl[None]
    if temp.ndim == 3:
        temp = temp[None]
    if refl.shape[0] != temp.shape[0] or refl.shape[2:] != temp.shape[2:]:
        raise DimensionError(f"reflectance {refl.shape} and temperature {temp.shape} disagree")
    groups = ("reflectance",) * refl.shape[1] + ("temperature",) * temp.shape[1]
    return SpectralStack(np.concatenate([refl, temp], axis=1), band_groups=groups, **meta)


def resample_steps(n_available: int, n_steps: int) -> np.ndarray:
    """Uniformly spaced time indices (repeats only when fewer steps exist)."""
    return np.round(np.linspace(0, n_available - 1, n_steps)).astype(int)


def compute_ranges(stacks, trim: float = 0.01, max_values: int = 200_000, seed: int = 0) -> np.ndarray:
    """Per-channel (lo, hi) from the trimmed valid values of ``stacks``."""
    rng = np.random.default_rng(seed)
    per_channel: list[list[np.ndarray]] = []
    for stack in stacks:
        data = stack.data if isinstance(stack, SpectralStack) else np.asarray(stack)
        c = data.shape[1]
        if not per_channel:
            per_channel = [[] for _ in range(c)]
        for ch in range(c):
            vals = data[:, ch].ravel()
            vals = vals[~np.isnan(vals)]
            if vals.size > max_values // 50:
                vals = rng.choice(vals, max_values // 50, replace=False)
            per_channel[ch].append(vals)
    ranges = np.zeros((len(per_channel), 2))
    for ch, chunks in enumerate(per_channel):
        vals = np.concatenate(chunks)
        if vals.size == 0:
            raise UnusableTileError(f"channel {ch} has no valid pixels to derive a range from")
        lo, hi = np.quantile(vals, [trim, 1.0 - trim])
        if not hi > lo:
            hi = lo + 1.0
        ranges[ch] = lo, hi
    return ranges


@dataclass
class HistogramImage:
    hist: np.ndarray  # (C, bins, T) counts
    valid_counts: np.ndarray  # (C, T) valid pixels per channel and step

    def frequencies(self) -> np.ndarray:
        return self.hist / np.maximum(self.valid_counts[:, None, :], 1)


def histogram_transform(stack: SpectralStack, ranges, bins: int = 32, steps: int = 32) -> HistogramImage:
    """Count valid pixels per (channel, bin, step) over fixed per-channel ranges.

    Values outside a range clamp to its first/last bin.  The time axis is
    resampled to ``steps`` by uniform index selection.
    """
    ranges = np.asarray(ranges, dtype=np.float64)
    t_all, c, h, w = stack.data.shape
    if ranges.shape != (c, 2):
        raise DimensionError(f"need one (lo, hi) per channel: ranges {ranges.shape}, channels {c}")
    if not (np.isfinite(ranges).all() and (ranges[:, 1] > ranges[:, 0]).all()):
        raise ParameterError("histogram ranges must be finite with lo < hi")
    idx = resample_steps(t_all, steps)
    data = stack.data[idx]  # (steps, C, H, W)
    if stack.valid is not None:
        data = np.where(stack.valid, data, np.nan)
    valid = ~np.isnan(data)
    if not valid.any():
        raise UnusableTileError("tile has no valid pixels at any time step")
    lo = ranges[:, 0][None, :, None, None]
    width = (ranges[:, 1] - ranges[:, 0])[None, :, None, None]
    with np.errstate(invalid="ignore"):
        b = np.floor((data - lo) / width * bins)
    b = np.clip(np.nan_to_num(b, nan=0.0), 0, bins - 1).astype(np.int64)
    # flat index over (channel, bin, step)
    ch = np.arange(c)[None, :, None, None]
    st = np.arange(steps)[:, None, None, None]
    flat = (ch * bins + b) * steps + st
    counts = np.bincount(flat[valid], minlength=c * bins * steps).reshape(c, bins, steps)
    valid_counts = valid.sum(axis=(2, 3)).T  # (C, steps)
    return HistogramImage(counts.astype(np.float32), valid_counts.astype(np.int64))


def preprocess_tile(
    reflectance: np.ndarray,
    temperature: np.ndarray,
    landcover: np.ndarray,
    crop_classes,
    ranges,
    bins: int = 32,
    steps: int = 32,
) -> HistogramImage:
    """mask -> combine -> histogram for one tile."""
    mask = build_mask(landcover, crop_classes)
    if not mask.usable:
        raise UnusableTileError("land-cover mask selects no pixels")
    stack = apply_mask(combine_channels(reflectance, temperature), mask)
    return histogram_transform(stack, ranges, bins, steps)
