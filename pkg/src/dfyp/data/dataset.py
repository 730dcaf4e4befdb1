"""On-disk datasets: DTEN tensors, a JSON manifest and a label CSV.

Manifest layout::

    {"meta": {...}, "entries": [{"sample_id", "tensor_path", "checksum", "split", "label"}, ...]}

``tensor_path`` is relative to the manifest's directory; ``checksum`` is the
sha256 of the DTEN file.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import dten
from ..errors import LoadError

SPLITS = ("train", "val", "test")
LABEL_FIELDS = ("sample_id", "year", "region_id", "yield")


@dataclass
class Sample:
    sample_id: str
    x: np.ndarray
    y: float
    split: str = "train"
    year: int = 0
    region_id: str = ""


@dataclass
class Dataset:
    entries: list[dict]
    meta: dict = field(default_factory=dict)
    root: Path | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self, split: str | None = None) -> list[str]:
        return [e["sample_id"] for e in self.entries if split is None or e["split"] == split]

    def split_counts(self) -> dict[str, int]:
        return {s: sum(e["split"] == s for e in self.entries) for s in SPLITS}

    def tensor(self, i: int) -> np.ndarray:
        """Load (and cache) one sample's tensor, verifying its checksum."""
        if i in self._cache:
            return self._cache[i]
        entry = self.entries[i]
        if "array" in entry:
            arr = entry["array"]
        else:
            path = self.root / entry["tensor_path"]
            if not path.exists():
                raise LoadError(f"sample {entry['sample_id']}: missing tensor file {path}")
            if dten.sha256_file(path) != entry["checksum"]:
                raise LoadError(f"sample {entry['sample_id']}: checksum mismatch in {path}")
            arr = dten.load(path)
        self._cache[i] = arr
        return arr

    def arrays(self, split: str | None = None) -> tuple[np.ndarray, np.ndarray, list[str]]:
        idx = [i for i, e in enumerate(self.entries) if split is None or e["split"] == split]
        if not idx:
            return np.zeros((0,)), np.zeros((0,)), []
        x = np.stack([self.tensor(i) for i in idx]).astype(np.float32)
        y = np.array([self.entries[i]["label"] for i in idx], dtype=np.float64)
        return x, y, [self.entries[i]["sample_id"] for i in idx]

    @classmethod
    def from_samples(cls, samples: list[Sample], meta: dict | None = None) -> "Dataset":
        entries = [
            {
                "sample_id": s.sample_id,
                "split": s.split,
                "label": float(s.y),
                "year": s.year,
                "region_id": s.region_id,
                "array": np.asarray(s.x, dtype=np.float32),
            }
            for s in samples
        ]
        return cls(entries, dict(meta or {}))


def save_dataset(ds: Dataset, out_dir) -> Path:
    """Write tensors, labels.csv and manifest.json; returns the manifest path."""
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    labels = []
    for i, e in enumerate(ds.entries):
        rel = f"tensors/{e['sample_id']}.dten"
        digest = dten.save(out / rel, ds.tensor(i))
        entries.append(
            {
                "sample_id": e["sample_id"],
                "tensor_path": rel,
                "checksum": digest,
                "split": e["split"],
                "label": float(e["label"]),
            }
        )
        labels.append((e["sample_id"], e.get("year", 0), e.get("region_id", ""), repr(float(e["label"]))))
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LABEL_FIELDS)
        writer.writerows(labels)
    meta = dict(ds.meta)
    meta["labels_csv"] = "labels.csv"
    manifest = {"meta": meta, "entries": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_dataset(manifest_path) -> Dataset:
    """Read a manifest; tensors load lazily and are checksum-verified on access.

    File existence and label agreement are checked eagerly so that a broken
    dataset fails before training starts.
    """
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise LoadError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: invalid JSON ({exc})") from exc
    root = path.parent
    entries = manifest.get("entries", [])
    meta = manifest.get("meta", {})
    for e in entries:
        for key in ("sample_id", "tensor_path", "checksum", "split", "label"):
            if key not in e:
                raise LoadError(f"manifest entry {e.get('sample_id', '?')}: missing field {key!r}")
        if not (root / e["tensor_path"]).exists():
            raise LoadError(f"sample {e['sample_id']}: missing tensor file {root / e['tensor_path']}")
    labels_name = meta.get("labels_csv")
    if labels_name and entries:
        lpath = root / labels_name
        if not lpath.exists():
            raise LoadError(f"label file missing: {lpath}")
        with open(lpath, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if len(rows) != len(entries):
            raise LoadError(f"{lpath}: {len(rows)} labels for {len(entries)} tensors")
        by_id = {r["sample_id"]: r for r in rows}
        for e in entries:
            row = by_id.get(e["sample_id"])
            if row is None:
                raise LoadError(f"sample {e['sample_id']}: no row in {lpath}")
            if float(row["yield"]) != float(e["label"]):
                raise LoadError(f"sample {e['sample_id']}: label differs between manifest and {lpath}")
            e["year"] = int(row["year"]) if row["year"] else 0
            e["region_id"] = row["region_id"]
    return Dataset(entries, meta, root)
