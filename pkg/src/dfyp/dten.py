"""DTEN tensor container and parameter checkpoints.

Layout: ``b"DTEN"``, version byte, dtype byte (0 = f32, 1 = f64), u8 rank,
``rank`` little-endian u32 extents, then the row-major little-endian payload.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import LoadError

MAGIC = b"DTEN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def encode(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype not in _CODES:
        raise TypeError(f"DTEN stores float32/float64 only, got {array.dtype}")
    if array.ndim > 255:
        raise ValueError("rank exceeds 255")
    code = _CODES[array.dtype]
    header = MAGIC + struct.pack("<BBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()


def decode(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if blob[:4] != MAGIC:
        raise LoadError(f"{source}: not a DTEN container")
    if len(blob) < 7:
        raise LoadError(f"{source}: truncated header")
    version, code, rank = struct.unpack("<BBB", blob[4:7])
    if version != VERSION:
        raise LoadError(f"{source}: unsupported DTEN version {version}")
    if code not in _DTYPES:
        raise LoadError(f"{source}: unknown dtype code {code}")
    end = 7 + 4 * rank
    shape = struct.unpack(f"<{rank}I", blob[7:end])
    dtype = _DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(blob) - end != expected:
        raise LoadError(f"{source}: payload is {len(blob) - end} bytes, expected {expected}")
    return np.frombuffer(blob, dtype=dtype, offset=end).reshape(shape).astype(dtype.newbyteorder("="))


def save(path, array: np.ndarray) -> str:
    """Write one tensor; returns the sha256 of the file contents."""
    blob = encode(array)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    return decode(blob, str(path))


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_checkpoint(directory, params: dict, buffers: dict | None = None, extra: dict | None = None) -> Path:
    """Store named tensors plus a manifest of names, shapes and checksums.

    ``params`` are trainable tensors, ``buffers`` non-trainable state (batch
    norm statistics); they go to separate subdirectories so parameters can be
    compared on their own.
    """
    directory = Path(directory)
    manifest: dict = {"format": "DTEN", "version": VERSION, "parameters": [], "buffers": []}
    for kind, tensors in (("parameters", params), ("buffers", buffers or {})):
        sub = directory / kind
        sub.mkdir(parents=True, exist_ok=True)
        for name, value in tensors.items():
            fname = f"{name}.dten"
            digest = save(sub / fname, np.asarray(value))
            manifest[kind].append(
                {"name": name, "shape": list(np.shape(value)), "file": f"{kind}/{fname}", "sha256": digest}
            )
    if extra:
        manifest["extra"] = extra
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> tuple[dict, dict, dict]:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise LoadError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    out: dict = {"parameters": {}, "buffers": {}}
    for kind in ("parameters", "buffers"):
        for entry in manifest.get(kind, []):
            fpath = directory / entry["file"]
            if not fpath.exists():
                raise LoadError(f"checkpoint entry {entry['name']}: missing file {fpath}")
            if sha256_file(fpath) != entry["sha256"]:
                raise LoadError(f"checkpoint entry {entry['name']}: checksum mismatch in {fpath}")
            out[kind][entry["name"]] = load(fpath)
    return out["parameters"], out["buffers"], manifest.get("extra", {})
