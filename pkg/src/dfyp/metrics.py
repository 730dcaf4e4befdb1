"""MSE objective and the RMSE / MAE / R^2 evaluation triple."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, as_tensor, mean, mul, sub

R2_UNDEFINED = "undefined"


@dataclass(frozen=True)
class MetricsReport:
    rmse: float
    mae: float
    r2: float | None  # None when the targets have zero variance
    n: int

    def r2_text(self) -> str:
        return R2_UNDEFINED if self.r2 is None else repr(self.r2)


def _pair(preds, targets) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise DimensionError(f"{p.size} predictions for {t.size} targets")
    if p.size == 0:
        raise ContractError("metrics need at least one prediction")
    return p, t


def mse_loss(preds, targets) -> Tensor:
    """Mean squared residual; differentiable in ``preds`` when it is a Tensor."""
    p = as_tensor(preds)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=p.dtype)
    if p.size != t.size:
        raise DimensionError(f"{p.size} predictions for {t.size} targets")
    if p.size == 0:
        raise ContractError("mse_loss of an empty batch")
    r = sub(p, t.reshape(p.shape))
    return mean(mul(r, r))


def metrics(preds, targets) -> MetricsReport:
    p, t = _pair(preds, targets)
    r = p - t
    ss_res = math.fsum(r * r)
    rmse = math.sqrt(ss_res / p.size)
    mae = math.fsum(np.abs(r)) / p.size
    centered = t - math.fsum(t) / t.size
    ss_tot = math.fsum(centered * centered)
    r2 = 1.0 - ss_res / ss_tot if p.size >= 2 and ss_tot > 0.0 else None
    return MetricsReport(rmse, mae, r2, int(p.size))
