"""Differentiable image and normalisation primitives built on :mod:`dfyp.tensor`.

Spatial ops take ``(N, C, H, W)`` batches; a bare ``(C, H, W)`` image is
accepted and returned without the batch axis.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ParameterError
from .tensor import Tensor, as_tensor, reshape

BN_MOMENTUM = 0.1
NORM_EPS = 1e-5


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")
    return x, False


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def pad2d(x: Tensor, p: int) -> Tensor:
    """Zero-pad the two trailing axes by ``p`` pixels."""
    if p == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    out = np.pad(x.data, width)
    return Tensor._result(out, (x,), lambda g: (g[..., p:-p, p:-p],), "pad2d")


def _fold_reflect(g: np.ndarray, n: int, p: int, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, 0)
    out = g[p : p + n].copy()
    for i in range(p):
        out[p - i] += g[i]
        out[n - 2 - i] += g[n + p + i]
    return np.moveaxis(out, 0, axis)


def pad_reflect(x: Tensor, p: int) -> Tensor:
    """Reflect-pad the two trailing axes (edge pixel not repeated)."""
    if p == 0:
        return x
    h, w = x.shape[-2:]
    if p >= h or p >= w:
        raise DimensionError(f"reflect padding {p} needs spatial extent > {p}, got {h}x{w}")
    width = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    out = np.pad(x.data, width, mode="reflect")

    def backward(g):
        g = _fold_reflect(g, h, p, x.ndim - 2)
        return (_fold_reflect(g, w, p, x.ndim - 1),)

    return Tensor._result(out, (x,), backward, "pad_reflect")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``w`` of shape (C_out, C_in, k, k)."""
    x, squeeze = _batched(x)
    n, c, h, wd = x.shape
    c_out, c_in, kh, kw = w.shape
    if c_in != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {c_in}")
    if stride < 1:
        raise ParameterError(f"stride must be positive, got {stride}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DimensionError(f"conv2d: {kh}x{kw} kernel larger than padded {h}x{wd} input (padding {padding})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (gm.T @ cols).reshape(w.shape)
        gb = gm.sum(axis=0) if b is not None else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return (gx, gw, gb)

    parents = (x, w, b) if b is not None else (x, w)
    y = Tensor._result(out, parents, backward, "conv2d")
    return _unbatch(y, squeeze)


def stencil2d(x: Tensor, k, pad_mode: str = "reflect") -> Tensor:
    """Apply one 2-D stencil to every channel independently, keeping H x W.

    ``k`` may be an ndarray (a fixed operator) or a Tensor (a learnable one);
    both go through the same arithmetic so equal stencils give equal bits.
    """
    k = as_tensor(k, x)
    kh, kw = k.shape
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"stencil must be square with odd extent, got {k.shape}")
    p = kh // 2
    h, w = x.shape[-2:]
    if h < kh or w < kw:
        raise DimensionError(f"image {h}x{w} smaller than {kh}x{kw} stencil")
    xp = pad_reflect(x, p) if pad_mode == "reflect" else pad2d(x, p)
    src = xp.data
    kd = k.data
    out = np.zeros(x.shape, dtype=np.result_type(src.dtype, kd.dtype))
    for i in range(kh):
        for j in range(kw):
            out += kd[i, j] * src[..., i : i + h, j : j + w]

    def backward(g):
        gk = np.empty_like(kd)
        gxp = np.zeros_like(src) if xp.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                win = src[..., i : i + h, j : j + w]
                gk[i, j] = np.sum(g * win)
                if gxp is not None:
                    gxp[..., i : i + h, j : j + w] += kd[i, j] * g
        return (gxp, gk)

    return Tensor._result(out, (xp, k), backward, "stencil2d")


def pool2d(x: Tensor, mode: str = "max", window="global", stride: int | None = None) -> Tensor:
    """Max or average pooling; ``window='global'`` reduces H x W to 1 x 1."""
    if mode not in ("max", "avg"):
        raise ParameterError(f"pool mode must be 'max' or 'avg', got {mode!r}")
    x, squeeze = _batched(x)
    n, c, h, w = x.shape
    if h == 0 or w == 0:
        raise DimensionError("pool2d on empty spatial extent")
    if window == "global":
        flat = x.data.reshape(n, c, h * w)
        if mode == "avg":
            out = flat.mean(axis=2).reshape(n, c, 1, 1).astype(x.dtype)
            inv = x.dtype.type(1.0 / (h * w))
            y = Tensor._result(out, (x,), lambda g: (np.broadcast_to(g * inv, x.shape),), "avgpool")
        else:
            idx = np.argmax(flat, axis=2)
            out = np.take_along_axis(flat, idx[..., None], axis=2).reshape(n, c, 1, 1)

            def backward(g):
                gx = np.zeros_like(flat)
                np.put_along_axis(gx, idx[..., None], g.reshape(n, c, 1), axis=2)
                return (gx.reshape(x.shape),)

            y = Tensor._result(out, (x,), backward, "maxpool")
        return _unbatch(y, squeeze)

    k = min(int(window), h, w)
    s = stride or k
    ho = (h - k) // s + 1
    wo = (w - k) // s + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    win = win.reshape(n, c, ho, wo, k * k)
    if mode == "avg":
        out = win.mean(axis=-1).astype(x.dtype)
        inv = x.dtype.type(1.0 / (k * k))

        def backward(g):
            gx = np.zeros_like(x.data)
            for i in range(k):
                for j in range(k):
                    gx[:, :, i : i + s * ho : s, j : j + s * wo : s] += g * inv
            return (gx,)

    else:
        arg = np.argmax(win, axis=-1)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        di, dj = np.divmod(arg, k)
        rows = np.arange(ho)[:, None] * s + di
        cols = np.arange(wo)[None, :] * s + dj
        nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")

        def backward(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, (nn_[:, :, None, None], cc[:, :, None, None], rows, cols), g)
            return (gx,)

    y = Tensor._result(np.ascontiguousarray(out), (x,), backward, f"{mode}pool")
    return _unbatch(y, squeeze)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b with w stored as (in, out)."""
    from .tensor import add, matmul

    y = matmul(x, w) if x.ndim >= 2 else reshape(matmul(reshape(x, (1, -1)), w), (w.shape[1],))
    return add(y, b) if b is not None else y


def layernorm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = NORM_EPS) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    if x.shape[-1] < 1:
        raise DimensionError("layernorm over an empty axis")
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (xc * inv).astype(x.dtype)

    def backward(g):
        gx = inv / d * (d * g - g.sum(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True))
        return (gx.astype(x.dtype),)

    y = Tensor._result(xhat, (x,), backward, "layernorm")
    return _affine(y, gain, bias)


def _affine(y: Tensor, gain, bias) -> Tensor:
    from .tensor import add, mul

    if gain is not None:
        y = mul(y, gain)
    if bias is not None:
        y = add(y, bias)
    return y


def batchnorm(
    x: Tensor,
    gain: Tensor | None,
    bias: Tensor | None,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = NORM_EPS,
) -> Tensor:
    """Batch normalisation over every axis but the channel axis (axis 1).

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, as is conventional).
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batchnorm expects (N,C) or (N,C,H,W), got {x.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    m = x.data.size // x.shape[1]
    if training:
        if m < 2:
            raise DimensionError("batchnorm in training mode needs more than one value per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * m / (m - 1)
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(bshape)
    xhat = ((x.data - mu.astype(x.dtype).reshape(bshape)) * inv).astype(x.dtype)

    if training:

        def backward(g):
            gsum = g.sum(axis=axes, keepdims=True)
            gdot = (g * xhat).sum(axis=axes, keepdims=True)
            return ((inv / m * (m * g - gsum - xhat * gdot)).astype(x.dtype),)

    else:

        def backward(g):
            return (g * inv,)

    y = Tensor._result(xhat, (x,), backward, "batchnorm")
    if gain is not None:
        gain = reshape(gain, bshape)
    if bias is not None:
        bias = reshape(bias, bshape)
    return _affine(y, gain, bias)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("training-mode dropout needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return Tensor._result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")
