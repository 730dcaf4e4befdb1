"""Central finite-difference gradient checking shared by the test modules."""
from __future__ import annotations

import numpy as np

from dfyp.tensor import Tensor

F32_TOL = 1e-3
F64_TOL = 1e-6


def rel_error(auto: np.ndarray, fd: np.ndarray, floor: float) -> np.ndarray:
    """|auto - fd| / max(|auto|, |fd|, floor).

    The floor keeps coordinates whose true derivative is near zero from
    turning rounding noise into a huge ratio; callers pass a small fraction of
    the largest derivative magnitude.
    """
    return np.abs(auto - fd) / np.maximum(np.maximum(np.abs(auto), np.abs(fd)), floor)


def pick_coords(tensors, n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """At least one coordinate per tensor, then random fill up to ``n`` (or every one)."""
    sizes = [t.size for t in tensors]
    total = sum(sizes)
    if total <= n:
        return [(i, j) for i, s in enumerate(sizes) for j in range(s)]
    coords = {(i, int(rng.integers(s))) for i, s in enumerate(sizes)}
    offsets = np.cumsum([0] + sizes)
    while len(coords) < n:
        flat = int(rng.integers(total))
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        coords.add((i, flat - offsets[i]))
    return sorted(coords)


def central_difference(loss_fn, tensors, coords, h: float) -> np.ndarray:
    """d loss / d tensors[i].flat[j] by central differences, evaluated in float64."""
    out = np.empty(len(coords))
    for k, (i, j) in enumerate(coords):
        flat = tensors[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        up = float(loss_fn().data)
        flat[j] = orig - h
        down = float(loss_fn().data)
        flat[j] = orig
        out[k] = (up - down) / (2 * h)
    return out


def autodiff(loss_fn, tensors, coords) -> np.ndarray:
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    return np.array([0.0 if tensors[i].grad is None else float(tensors[i].grad.reshape(-1)[j]) for i, j in coords])


def check(fn, arrays, rng, n: int = 100, floor_frac: float = 1e-2, weights_seed: int = 0, h: float = 1e-5):
    """Gradient-check ``fn(*tensors)`` in float64 and in float32.

    The output is reduced to a scalar with fixed random weights.  float64
    autodiff is compared with a float64 central difference with step ``h``; the
    float32 autodiff is compared with the float64 difference as oracle.
    Returns (max float32 error, max float64 error, coordinate count).
    """
    # evaluate both precisions at the same (float32-representable) point
    arrays = [np.asarray(a, dtype=np.float32).astype(np.float64) for a in arrays]
    errors = {}
    fd64 = None
    coords = None
    for dtype in (np.float64, np.float32):
        tensors = [Tensor(np.array(a, dtype=dtype), requires_grad=True) for a in arrays]
        probe = fn(*tensors)
        w = np.random.default_rng(weights_seed).standard_normal(probe.shape)

        def loss(tensors=tensors, w=w, dtype=dtype):
            out = fn(*tensors)
            return (out * Tensor(w.astype(dtype), dtype=dtype)).sum()

        if coords is None:
            coords = pick_coords(tensors, n, rng)
        g = autodiff(loss, tensors, coords)
        if dtype is np.float64:
            fd64 = central_difference(loss, tensors, coords, h)
        floor = max(floor_frac * np.max(np.abs(fd64)), 1e-12)
        errors[dtype] = float(np.max(rel_error(g, fd64, floor)))
    return errors[np.float32], errors[np.float64], len(coords)
