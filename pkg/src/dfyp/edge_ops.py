"""Classical edge operators, the learnable Sobel/Scharr blend and the selection gate.

Stencils follow the cross-correlation convention used by
:func:`dfyp.functional.stencil2d`: ``kx`` responds positively to intensity
increasing along columns, ``ky`` along rows.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy import ndimage

from . import functional as F
from .errors import NumericError, ParameterError
from .nn import Module, parameter
from .tensor import Tensor, add, mul, no_grad, sigmoid, sqrt_eps, stack, sub, tmax

EDGE_EPS = 1e-12

POOL = ("sobel", "scharr", "learnable")
# warm-up order is the pool order; ties go to the first entry of this tuple
TIE_PRIORITY = ("learnable", "sobel", "scharr")
CLASSICAL = ("sobel", "canny", "kirsch", "laplacian", "log", "prewitt", "roberts", "scharr")


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


SOBEL_X = _frozen([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]])
SCHARR_X = _frozen([[-3, 0, 3], [-10, 0, 10], [-3, 0, 3]])
PREWITT_X = _frozen([[-1, 0, 1], [-1, 0, 1], [-1, 0, 1]])
# 2x2 Roberts cross embedded in the lower-right of a 3x3 stencil
ROBERTS_X = _frozen([[0, 0, 0], [0, 1, 0], [0, 0, -1]])
ROBERTS_Y = _frozen([[0, 0, 0], [0, 0, 1], [0, -1, 0]])
LAPLACIAN = _frozen([[0, 1, 0], [1, -4, 1], [0, 1, 0]])
LOG_5 = _frozen(
    [
        [0, 0, -1, 0, 0],
        [0, -1, -2, -1, 0],
        [-1, -2, 16, -2, -1],
        [0, -1, -2, -1, 0],
        [0, 0, -1, 0, 0],
    ]
)


def _kirsch_stencils() -> tuple[np.ndarray, ...]:
    ring = [(0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (2, 1), (2, 0), (1, 0)]
    values = [5, 5, 5, -3, -3, -3, -3, -3]
    out = []
    for shift in range(8):
        k = np.zeros((3, 3))
        for pos, v in zip(ring, values[-shift:] + values[:-shift] if shift else values):
            k[pos] = v
        out.append(_frozen(k))
    return tuple(out)


KIRSCH = _kirsch_stencils()


@dataclass(frozen=True)
class KernelPair:
    id: str
    kx: object  # ndarray, or Tensor for the learnable operator
    ky: object
    trainable: bool = False


@dataclass(frozen=True)
class CompassOperator:
    """Bank of directional stencils; the response is the max over directions."""

    id: str
    stencils: tuple[np.ndarray, ...]
    trainable: bool = False


@dataclass(frozen=True)
class PipelineOperator:
    """Canny: Gaussian smoothing, Sobel gradients, NMS and hysteresis.

    Thresholds are fractions of each image's maximum suppressed magnitude
    when ``relative`` is set, absolute magnitudes otherwise.
    """

    id: str = "canny"
    sigma: float = 1.0
    low: float = 0.1
    high: float = 0.2
    relative: bool = True
    trainable: bool = False

    def __post_init__(self):
        if not self.low < self.high:
            raise ParameterError(f"canny needs low < high threshold, got {self.low} >= {self.high}")


EdgeOperator = Union[KernelPair, CompassOperator, PipelineOperator]


def classical_kernels() -> dict[str, EdgeOperator]:
    """The eight classical operators, keyed by lowercase name."""
    return {
        "sobel": KernelPair("sobel", SOBEL_X, SOBEL_X.T),
        "canny": PipelineOperator(),
        "kirsch": CompassOperator("kirsch", KIRSCH),
        "laplacian": KernelPair("laplacian", LAPLACIAN, LAPLACIAN.T),
        "log": KernelPair("log", LOG_5, LOG_5.T),
        "prewitt": KernelPair("prewitt", PREWITT_X, PREWITT_X.T),
        "roberts": KernelPair("roberts", ROBERTS_X, ROBERTS_Y),
        "scharr": KernelPair("scharr", SCHARR_X, SCHARR_X.T),
    }


class LearnableKernel(Module):
    """K(lam) = lam * Sobel + (1 - lam) * Scharr with lam = sigmoid(raw_lambda)."""

    def __init__(self, raw_lambda: float = 0.0):
        self.raw_lambda = parameter([raw_lambda])

    @property
    def lam(self) -> float:
        return float(1.0 / (1.0 + math.exp(-float(self.raw_lambda.data[0]))))

    def kernel(self, lam: float | None = None) -> KernelPair:
        """Blend per direction; ``lam`` pins the coefficient (no gradient to raw_lambda)."""
        if lam is None:
            coeff = sigmoid(self.raw_lambda.reshape(1, 1))
        else:
            coeff = Tensor(np.full((1, 1), lam), dtype=self.raw_lambda.dtype)
        dtype = self.raw_lambda.dtype
        one_minus = sub(1.0, coeff)
        kx = add(mul(coeff, SOBEL_X.astype(dtype)), mul(one_minus, SCHARR_X.astype(dtype)))
        ky = add(mul(coeff, SOBEL_X.T.astype(dtype)), mul(one_minus, SCHARR_X.T.astype(dtype)))
        return KernelPair("learnable", kx, ky, trainable=True)


def learnable_kernel(state: LearnableKernel, lam: float | None = None) -> KernelPair:
    return state.kernel(lam)


def apply_operator(x: Tensor, op: EdgeOperator) -> Tensor:
    """Per-channel edge response with the same shape as ``x``.

    Stencil pairs give sqrt(Gx^2 + Gy^2 + eps); Kirsch gives the max over its
    eight compass responses; Canny gives a constant binary map.
    """
    if not np.isfinite(x.data).all():
        raise NumericError("apply_operator: non-finite input")
    if isinstance(op, KernelPair):
        gx = F.stencil2d(x, op.kx)
        gy = F.stencil2d(x, op.ky)
        return sqrt_eps(add(mul(gx, gx), mul(gy, gy)), EDGE_EPS)
    if isinstance(op, CompassOperator):
        return tmax(stack([F.stencil2d(x, k) for k in op.stencils], axis=0), axis=0)
    if isinstance(op, PipelineOperator):
        return Tensor(canny(x.data, op), dtype=x.dtype)
    raise TypeError(f"unknown operator type {type(op).__name__}")


# -- Canny (non-differentiable; fixed-operator benchmark only) ----------------------


def _sobel_np(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    with no_grad():
        t = Tensor(img, dtype=np.float64)
        return F.stencil2d(t, SOBEL_X).data, F.stencil2d(t, SOBEL_X.T).data


def canny(image: np.ndarray, params: PipelineOperator | None = None) -> np.ndarray:
    """Binary edge map over the trailing two axes of ``image``.

    Leading axes are treated as independent images.
    """
    params = params or PipelineOperator()
    img = np.asarray(image, dtype=np.float64)
    if img.shape[-1] < 5 or img.shape[-2] < 5:
        raise ParameterError(f"canny needs at least 5x5 images, got {img.shape[-2:]}")
    lead = img.shape[:-2]
    img = img.reshape((-1,) + img.shape[-2:])
    smooth = ndimage.gaussian_filter(img, params.sigma, axes=(1, 2), mode="reflect")
    gx, gy = _sobel_np(smooth)
    mag = np.hypot(gx, gy)

    # quantise the gradient direction to 0, 45, 90, 135 degrees
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = (((angle + 22.5) // 45) % 4).astype(np.int8)
    padded = np.pad(mag, ((0, 0), (1, 1), (1, 1)))
    h, w = mag.shape[1:]

    def shifted(dr, dc):
        return padded[:, 1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]

    # (forward neighbour along the gradient) per sector, in (row, col) offsets
    steps = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros(mag.shape, dtype=bool)
    for s, (dr, dc) in steps.items():
        fwd = shifted(dr, dc)
        back = shifted(-dr, -dc)
        keep |= (sector == s) & (mag >= back) & (mag > fwd)
    thin = np.where(keep, mag, 0.0)

    if params.relative:
        peak = thin.reshape(len(thin), -1).max(axis=1)[:, None, None]
        hi, lo = params.high * peak, params.low * peak
    else:
        hi, lo = params.high, params.low
    strong = (thin >= hi) & (thin > 0)
    weak = (thin >= lo) & (thin > 0)
    structure = np.zeros((3, 3, 3), dtype=bool)
    structure[1] = True
    labels, _ = ndimage.label(weak, structure=structure)
    seeds = np.unique(labels[strong])
    edges = np.isin(labels, seeds[seeds > 0]) & weak
    return edges.astype(np.float64).reshape(lead + (h, w))


# -- operator selection gate -----------------------------------------------------------


@dataclass
class OperatorGateState:
    """Validation-score history per pool operator and the selection log."""

    history: dict[str, list[float]] = field(default_factory=lambda: {k: [] for k in POOL})
    log: list[tuple[int, str]] = field(default_factory=list)
    warmup: int = len(POOL)

    def score(self, op_id: str) -> float | None:
        h = self.history[op_id]
        return math.fsum(h) / len(h) if h else None

    def scores(self) -> dict[str, float | None]:
        return {k: self.score(k) for k in POOL}


def gate_score_update(state: OperatorGateState, op_id: str, epoch_score: float) -> OperatorGateState:
    if op_id not in state.history:
        raise ParameterError(f"operator {op_id!r} is not in the adaptive pool {POOL}")
    state.history[op_id].append(float(epoch_score))
    return state


def gate_select(state: OperatorGateState, epoch: int) -> str:
    """Round-robin through the pool during warm-up, then argmax of mean score."""
    if epoch < state.warmup:
        choice = POOL[epoch % len(POOL)]
    else:
        best = None
        for op_id in TIE_PRIORITY:
            s = state.score(op_id)
            if s is not None and (best is None or s > best[0]):
                best = (s, op_id)
        choice = best[1] if best else TIE_PRIORITY[0]
    state.log.append((epoch, choice))
    return choice


def one_hot(op_id: str) -> dict[str, int]:
    """Hard-selection coefficients: exactly one pool entry is 1."""
    return {k: int(k == op_id) for k in POOL}


GATE_LOG_FIELDS = ("epoch", "selected_operator", "score_sobel", "score_scharr", "score_learnable", "lambda")


def write_gate_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(GATE_LOG_FIELDS)
        for row in rows:
            writer.writerow([_fmt(row.get(k)) for k in GATE_LOG_FIELDS])


def read_gate_log(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)
