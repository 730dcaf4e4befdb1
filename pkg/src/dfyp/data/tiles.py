"""Directory-level preprocessing: raw tiles on disk -> histogram dataset.

Input layout::

    <in>/tiles/<sample_id>/reflectance.dten   (T, 7, H, W)
    <in>/tiles/<sample_id>/temperature.dten   (T, 2, H, W)
    <in>/tiles/<sample_id>/landcover.dten     (H, W) class codes
    <in>/labels.csv                           sample_id,year,region_id,yield
    <in>/splits.csv                           optional sample_id,split
"""
from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import dten
from ..errors import LoadError, UnusableTileError
from .dataset import Dataset, Sample, save_dataset
from .pipeline import apply_mask, build_mask, combine_channels, compute_ranges, histogram_transform
from .synth import split_assignment

TILE_FILES = ("reflectance.dten", "temperature.dten", "landcover.dten")


@dataclass
class PreprocessResult:
    dataset: Dataset
    unusable: list[tuple[str, str]] = field(default_factory=list)
    manifest: Path | None = None


def _read_labels(path: Path) -> dict[str, dict]:
    if not path.exists():
        raise LoadError(f"label file missing: {path}")
    with open(path, newline="") as fh:
        return {row["sample_id"]: row for row in csv.DictReader(fh)}


def _read_splits(path: Path) -> dict[str, str] | None:
    if not path.exists():
        return None
    with open(path, newline="") as fh:
        return {row["sample_id"]: row["split"] for row in csv.DictReader(fh)}


def _masked_stack(tile_dir: Path, crop_classes):
    missing = [f for f in TILE_FILES if not (tile_dir / f).exists()]
    if missing:
        raise LoadError(f"tile {tile_dir.name}: missing {', '.join(missing)}")
    refl = dten.load(tile_dir / "reflectance.dten")
    temp = dten.load(tile_dir / "temperature.dten")
    mask = build_mask(dten.load(tile_dir / "landcover.dten"), crop_classes)
    if not mask.usable:
        raise UnusableTileError("land-cover mask selects no pixels")
    return apply_mask(combine_channels(refl, temp), mask)


def _histogram_job(args):
    tile_dir, crop_classes, ranges, bins, steps = args
    try:
        stack = _masked_stack(tile_dir, crop_classes)
        return histogram_transform(stack, ranges, bins, steps).hist, None
    except UnusableTileError as exc:
        return None, str(exc)


def preprocess_directory(
    in_dir,
    out_dir,
    crop_classes=(1,),
    bins: int = 32,
    steps: int = 32,
    trim: float = 0.01,
    seed: int = 0,
    range_tiles: int = 200,
    workers: int = 1,
) -> PreprocessResult:
    """Mask -> combine -> histogram every tile; unusable tiles are skipped and listed.

    Histogram ranges come from up to ``range_tiles`` training tiles and are
    recorded in the manifest meta.
    """
    in_dir = Path(in_dir)
    tiles_root = in_dir / "tiles"
    if not tiles_root.is_dir():
        raise LoadError(f"input directory has no tiles/ folder: {tiles_root}")
    labels = _read_labels(in_dir / "labels.csv")
    ids = sorted(p.name for p in tiles_root.iterdir() if p.is_dir())
    unknown = [i for i in ids if i not in labels]
    if unknown:
        raise LoadError(f"tile {unknown[0]}: no row in {in_dir / 'labels.csv'}")
    splits = _read_splits(in_dir / "splits.csv")
    if splits is None:
        splits = dict(zip(ids, split_assignment(len(ids), seed)))

    unusable: list[tuple[str, str]] = []
    stacks = []
    for sid in [i for i in ids if splits.get(i) == "train"][:range_tiles]:
        try:
            stacks.append(_masked_stack(tiles_root / sid, crop_classes))
        except UnusableTileError:
            continue
    if not stacks:
        raise UnusableTileError("no usable training tiles to derive histogram ranges from")
    ranges = compute_ranges(stacks, trim=trim, seed=seed)

    jobs = [(tiles_root / sid, tuple(crop_classes), ranges, bins, steps) for sid in ids]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_histogram_job, jobs, chunksize=8))
    else:
        outputs = [_histogram_job(j) for j in jobs]

    samples = []
    for sid, (hist, reason) in zip(ids, outputs):
        if hist is None:
            unusable.append((sid, reason))
            continue
        row = labels[sid]
        samples.append(
            Sample(sid, hist, float(row["yield"]), splits.get(sid, "train"), int(row["year"] or 0), row["region_id"])
        )
    meta = {
        "kind": "histogram",
        "preset": "modis-like",
        "gsd_m": 500.0,
        "ranges": ranges.tolist(),
        "bins": bins,
        "steps": steps,
        "crop_classes": sorted(int(c) for c in crop_classes),
    }
    ds = Dataset.from_samples(samples, meta)
    manifest = save_dataset(ds, out_dir) if samples else None
    return PreprocessResult(ds, unusable, manifest)
