"""Seeded synthetic stand-in for the MODIS and Sentinel-2 yield datasets.

Each tile is a Voronoi partition into fields with a land-cover class per
field.  Its yield label follows

    Y = intercept + w . (masked band means) + v * (edge density) + N(0, noise^2)

where edge density is the mean Sobel magnitude (Laplacian magnitude for the
second half of a drift dataset) of the time-averaged first band over crop
pixels.  The designed features are kept with every sample so a least-squares
oracle can be fitted against them.
"""
from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .. import dten
from ..edge_ops import LAPLACIAN, SOBEL_X
from .dataset import Dataset, LoadError, Sample, save_dataset
from .pipeline import (
    REFLECTANCE_BANDS,
    SpectralStack,
    apply_mask,
    build_mask,
    combine_channels,
    compute_ranges,
    histogram_transform,
)

CROP = 1
MODIS_WEIGHTS = (-20.0, 60.0, -15.0, 10.0, 25.0, 15.0, -10.0, 30.0, 20.0)
SENTINEL_WEIGHTS = (40.0, 60.0, -30.0)
# per-channel seasonal amplitude (reflectance x7, temperature x2)
MODIS_AMPLITUDE = np.array([-0.05, 0.25, -0.03, 0.02, 0.10, 0.05, 0.02, 0.10, 0.08])
PRESETS = ("modis-like", "sentinel-like")


@dataclass
class SyntheticSpec:
    field_count: tuple[int, int] = (3, 8)
    band_weights: tuple[float, ...] | None = None
    edge_weight: float = 20.0
    noise: float = 0.0
    seed: int = 0
    tile_size: int | None = None
    time_steps: int = 45
    intercept: float = 0.0
    crop_fraction: float = 0.7
    level_spread: float = 0.08
    field_spread: float = 0.05
    pixel_noise: float = 0.02
    drift: bool = False

    def weights(self, preset: str) -> np.ndarray:
        if self.band_weights is not None:
            return np.asarray(self.band_weights, dtype=np.float64)
        return np.asarray(MODIS_WEIGHTS if preset == "modis-like" else SENTINEL_WEIGHTS)

    def size(self, preset: str) -> int:
        return self.tile_size or (32 if preset == "modis-like" else 256)


@dataclass
class RawTile:
    values: np.ndarray  # (T, C, H, W)
    landcover: np.ndarray  # (H, W) class codes

    @property
    def reflectance(self) -> np.ndarray:
        return self.values[:, :REFLECTANCE_BANDS]

    @property
    def temperature(self) -> np.ndarray:
        return self.values[:, REFLECTANCE_BANDS:]


def _fields(rng: np.random.Generator, size: int, spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    k = int(rng.integers(spec.field_count[0], spec.field_count[1] + 1))
    centers = rng.uniform(0, size, size=(k, 2))
    rr, cc = np.mgrid[0:size, 0:size]
    d2 = (rr[None] - centers[:, 0, None, None]) ** 2 + (cc[None] - centers[:, 1, None, None]) ** 2
    field_map = np.argmin(d2, axis=0)
    classes = np.where(rng.random(k) < spec.crop_fraction, CROP, rng.choice([2, 3], size=k))
    if not (classes == CROP).any():
        classes[0] = CROP
    return field_map, classes


def raw_tile(spec: SyntheticSpec, index: int, preset: str = "modis-like") -> RawTile:
    rng = np.random.default_rng([spec.seed, index])
    size = spec.size(preset)
    field_map, classes = _fields(rng, size, spec)
    n_fields = len(classes)
    if preset == "modis-like":
        c, t = 9, spec.time_steps
        base = np.array([0.3] * REFLECTANCE_BANDS + [0.5, 0.5])
        amp = MODIS_AMPLITUDE
    else:
        c, t = 3, 1
        base = np.array([0.3, 0.4, 0.3])
        amp = np.zeros(c)
    level = base + spec.level_spread * rng.normal(size=c)
    field_dev = rng.normal(0.0, spec.field_spread, size=(n_fields, c))
    peak = rng.uniform(0.3, 0.7) * t
    season = np.exp(-(((np.arange(t) - peak) / max(t / 5.0, 1.0)) ** 2)) if t > 1 else np.ones(1)
    spatial = field_dev[field_map].transpose(2, 0, 1)  # (C, H, W)
    noise = rng.standard_normal(size=(t, c, size, size), dtype=np.float32) * spec.pixel_noise
    values = level[None, :, None, None] + spatial[None] + amp[None, :, None, None] * season[:, None, None, None]
    values = values + noise
    return RawTile(values, classes[field_map].astype(np.float64))


def _edge_density(image: np.ndarray, mask: np.ndarray, kind: str) -> float:
    from ..functional import stencil2d
    from ..tensor import Tensor, no_grad

    with no_grad():
        t = Tensor(image[None], dtype=np.float64)
        if kind == "laplacian":
            mag = np.abs(stencil2d(t, LAPLACIAN).data[0])
        else:
            gx = stencil2d(t, SOBEL_X).data[0]
            gy = stencil2d(t, SOBEL_X.T).data[0]
            mag = np.sqrt(gx * gx + gy * gy)
    return float(mag[mask].mean())


def designed_features(tile: RawTile, edge_kind: str = "sobel") -> np.ndarray:
    """Masked per-band means over time and pixels, then the edge density."""
    mask = tile.landcover == CROP
    means = tile.values[:, :, mask].mean(axis=(0, 2))
    edge = _edge_density(tile.values[:, 0].mean(axis=0), mask, edge_kind)
    return np.append(means, edge)


def label_for(spec: SyntheticSpec, index: int, features: np.ndarray, preset: str) -> float:
    w = spec.weights(preset)
    eps = np.random.default_rng([spec.seed, index, 7]).standard_normal()
    return float(spec.intercept + w @ features[:-1] + spec.edge_weight * features[-1] + spec.noise * eps)


def split_assignment(n: int, seed: int, fractions=(0.8, 0.1)) -> list[str]:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    order = np.random.default_rng([seed, 99]).permutation(n)
    splits = ["test"] * n
    for rank, i in enumerate(order):
        splits[i] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return splits


def _edge_kind(spec: SyntheticSpec, index: int, n: int) -> str:
    return "laplacian" if spec.drift and index >= n // 2 else "sobel"


def _sample_job(args):
    spec, i, n_samples, preset, ranges, bins, steps = args
    tile = raw_tile(spec, i, preset)
    feats = designed_features(tile, _edge_kind(spec, i, n_samples))
    y = label_for(spec, i, feats, preset)
    if preset == "modis-like":
        stack = apply_mask(combine_channels(tile.reflectance, tile.temperature), build_mask(tile.landcover, {CROP}))
        x = histogram_transform(stack, ranges, bins, steps).hist
    else:
        x = tile.values[0].astype(np.float32)
    return x, y, feats


def synth_generate(
    spec: SyntheticSpec,
    n_samples: int,
    preset: str = "modis-like",
    bins: int = 32,
    steps: int = 32,
    range_tiles: int = 200,
    trim: float = 0.01,
    workers: int = 1,
) -> Dataset:
    """Generate ``n_samples`` labelled samples with an 80/10/10 seeded split.

    modis-like samples are histogram images (9 x bins x steps, raw counts);
    sentinel-like samples are the raw 3 x S x S tiles.  Tiles are
    independent, so ``workers > 1`` fans them out and merges in index order.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown synthetic preset {preset!r}; expected one of {PRESETS}")
    splits = split_assignment(n_samples, spec.seed)
    meta = {
        "kind": "histogram" if preset == "modis-like" else "image",
        "preset": preset,
        "gsd_m": 500.0 if preset == "modis-like" else 10.0,
        "spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()},
        "coefficients": {
            "band_weights": spec.weights(preset).tolist(),
            "edge_weight": spec.edge_weight,
            "intercept": spec.intercept,
        },
    }
    ranges = None
    if preset == "modis-like":
        train_idx = [i for i, s in enumerate(splits) if s == "train"][:range_tiles] or list(range(min(n_samples, range_tiles)))
        stacks = []
        for i in train_idx:
            tile = raw_tile(spec, i, preset)
            stacks.append(apply_mask(SpectralStack(tile.values), build_mask(tile.landcover, {CROP})))
        ranges = compute_ranges(stacks, trim=trim, seed=spec.seed) if stacks else None
        if ranges is not None:
            meta["ranges"] = ranges.tolist()
        meta.update(bins=bins, steps=steps)

    jobs = [(spec, i, n_samples, preset, ranges, bins, steps) for i in range(n_samples)]
    if workers > 1 and n_samples > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_sample_job, jobs, chunksize=16))
    else:
        outputs = [_sample_job(j) for j in jobs]
    samples, features = [], []
    for i, (x, y, feats) in enumerate(outputs):
        samples.append(Sample(f"s{i:05d}", x, y, splits[i], year=2009 + i % 7, region_id=f"r{i:05d}"))
        features.append(feats)
    ds = Dataset.from_samples(samples, meta)
    for entry, feats in zip(ds.entries, features):
        entry["features"] = feats
    return ds


def feature_matrix(ds: Dataset, split: str | None = None) -> np.ndarray:
    """Designed features (band means + edge density) for generated samples."""
    if ds.entries and "features" not in ds.entries[0]:
        attach_features(ds)
    rows = [e["features"] for e in ds.entries if split is None or e["split"] == split]
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), -1)


def least_squares_r2(ds: Dataset, train: str = "train", test: str = "test") -> float:
    """Fit labels on the designed features by least squares; R^2 on ``test``."""
    def design(split):
        f = feature_matrix(ds, split)
        return np.hstack([np.ones((len(f), 1)), f])

    y_tr = np.array([e["label"] for e in ds.entries if e["split"] == train])
    y_te = np.array([e["label"] for e in ds.entries if e["split"] == test])
    coef, *_ = np.linalg.lstsq(design(train), y_tr, rcond=None)
    resid = y_te - design(test) @ coef
    return float(1.0 - (resid @ resid) / ((y_te - y_te.mean()) @ (y_te - y_te.mean())))


def calibrate_noise(
    spec: SyntheticSpec, target_r2: float = 0.9, n_probe: int = 400, preset: str = "modis-like"
) -> float:
    """Noise level at which the designed features explain ``target_r2`` of label variance.

    With signal variance s2 the attainable R^2 is s2 / (s2 + noise^2), so
    noise = sqrt(s2 * (1 - r2) / r2).
    """
    if not 0.0 < target_r2 < 1.0:
        raise ValueError("target_r2 must lie in (0, 1)")
    clean = SyntheticSpec(**{**asdict(spec), "noise": 0.0})
    ys = []
    for i in range(n_probe):
        tile = raw_tile(clean, i, preset)
        ys.append(label_for(clean, i, designed_features(tile, _edge_kind(clean, i, n_probe)), preset))
    s2 = float(np.var(ys))
    return float(np.sqrt(s2 * (1.0 - target_r2) / target_r2))


def write_features(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        n = len(ds.entries[0]["features"]) if ds.entries else 0
        writer.writerow(["sample_id"] + [f"band{k}" for k in range(n - 1)] + ["edge"])
        for e in ds.entries:
            writer.writerow([e["sample_id"]] + [repr(float(v)) for v in e["features"]])


def attach_features(ds: Dataset) -> None:
    """Fill entry features from the ``features.csv`` saved beside a loaded dataset."""
    if ds.root is None or not (ds.root / "features.csv").exists():
        raise LoadError("dataset has no designed features (not generated by synth)")
    with open(ds.root / "features.csv", newline="") as fh:
        rows = {r[0]: [float(v) for v in r[1:]] for r in list(csv.reader(fh))[1:]}
    for e in ds.entries:
        if e["sample_id"] not in rows:
            raise LoadError(f"sample {e['sample_id']}: no row in features.csv")
        e["features"] = np.array(rows[e["sample_id"]])


def save_synthetic(ds: Dataset, out_dir) -> Path:
    """Save like any dataset, plus ``features.csv`` with the designed features."""
    path = save_dataset(ds, out_dir)
    write_features(ds, Path(out_dir) / "features.csv")
    return path


def export_raw_tiles(spec: SyntheticSpec, n_samples: int, out_dir, preset: str = "modis-like") -> Path:
    """Write un-preprocessed tiles as ``tiles/<id>/{reflectance,temperature,landcover}.dten``.

    Also writes ``labels.csv`` and ``splits.csv``, the input layout read by
    ``dfyp preprocess``.
    """
    if preset != "modis-like":
        raise ValueError("raw tile export is defined for the modis-like layout only")
    out = Path(out_dir)
    splits = split_assignment(n_samples, spec.seed)
    rows = []
    for i in range(n_samples):
        tile = raw_tile(spec, i, preset)
        sid = f"s{i:05d}"
        tdir = out / "tiles" / sid
        tdir.mkdir(parents=True, exist_ok=True)
        dten.save(tdir / "reflectance.dten", tile.reflectance.astype(np.float32))
        dten.save(tdir / "temperature.dten", tile.temperature.astype(np.float32))
        dten.save(tdir / "landcover.dten", tile.landcover.astype(np.float32))
        y = label_for(spec, i, designed_features(tile, _edge_kind(spec, i, n_samples)), preset)
        rows.append((sid, 2009 + i % 7, f"r{i:05d}", repr(y), splits[i]))
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "year", "region_id", "yield"])
        writer.writerows(r[:4] for r in rows)
    with open(out / "splits.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "split"])
        writer.writerows((r[0], r[4]) for r in rows)
    return out
