import json
import struct

import numpy as np
import pytest

from dfyp import dten
from dfyp.errors import LoadError


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_roundtrip_bit_identical(tmp_path, dtype):
    a = np.random.default_rng(0).standard_normal((3, 4, 5)).astype(dtype)
    dten.save(tmp_path / "a.dten", a)
    b = dten.load(tmp_path / "a.dten")
    assert b.dtype == dtype and b.shape == a.shape and b.tobytes() == a.tobytes()


def test_header_layout():
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    blob = dten.encode(a)
    assert blob[:4] == b"DTEN"
    version, dtype_code, rank = blob[4], blob[5], blob[6]
    assert (version, dtype_code, rank) == (1, 0, 2)
    assert struct.unpack("<2I", blob[7:15]) == (2, 3)
    assert blob[15:] == a.astype("<f4").tobytes()
    assert dten.encode(a.astype(np.float64))[5] == 1


def test_scalar_and_empty_shapes():
    for a in (np.float64(2.5) * np.ones(()), np.zeros((0, 3), dtype=np.float32)):
        b = dten.decode(dten.encode(a))
        assert b.shape == a.shape and b.tobytes() == a.tobytes()


def test_bad_magic_and_truncation():
    blob = dten.encode(np.ones(4, dtype=np.float32))
    with pytest.raises(LoadError):
        dten.decode(b"XTEN" + blob[4:])
    with pytest.raises(LoadError):
        dten.decode(blob[:-2])


def test_checkpoint_roundtrip_and_checksum(tmp_path):
    params = {"w": np.ones((2, 2), dtype=np.float32), "b": np.zeros(2, dtype=np.float32)}
    bufs = {"bn.running_mean": np.arange(3.0, dtype=np.float32)}
    dten.save_checkpoint(tmp_path, params, bufs, {"note": "x"})
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert {e["name"] for e in manifest["parameters"]} == {"w", "b"}
    assert manifest["parameters"][0]["shape"] in ([2, 2], [2])
    p, b, extra = dten.load_checkpoint(tmp_path)
    assert np.array_equal(p["w"], params["w"]) and np.array_equal(b["bn.running_mean"], bufs["bn.running_mean"])
    assert extra == {"note": "x"}
    # corrupt one tensor file
    f = tmp_path / "parameters" / "w.dten"
    raw = bytearray(f.read_bytes())
    raw[-1] ^= 0xFF
    f.write_bytes(bytes(raw))
    with pytest.raises(LoadError, match="w"):
        dten.load_checkpoint(tmp_path)
