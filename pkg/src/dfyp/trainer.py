"""Joint training loop, evaluation and the multi-run ablation / operator benchmarks."""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dten
from .config import ModelConfig, to_text
from .data.dataset import Dataset
from .edge_ops import CLASSICAL, POOL, OperatorGateState, gate_score_update, gate_select, write_gate_log
from .errors import ConfigError, ContractError, NumericError
from .metrics import MetricsReport, metrics, mse_loss
from .model import DFYP, VARIANT_PARTS
from .optim import Adam
from .tensor import Tensor, no_grad

REPORT_FIELDS = ("variant", "seed", "rmse", "mae", "r2", "n")
BENCH_FIELDS = ("operator", "seed", "rmse", "mae", "r2", "n")
ERROR_FIELDS = ("sample_id", "truth", "prediction", "error")
BENCH_OPERATORS = CLASSICAL + ("aol",)


# -- input / target normalisation ---------------------------------------------------


@dataclass
class Normalizer:
    """Histogram counts -> frequencies, optional per-channel standardisation, target standardisation.

    All statistics come from the training split and travel with the checkpoint.
    """

    kind: str = "image"
    x_mean: list[float] = field(default_factory=list)
    x_std: list[float] = field(default_factory=list)
    y_mean: float = 0.0
    y_std: float = 1.0

    def _base(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "histogram":
            # (N, C, bins, T): divide by the valid-pixel count of each (channel, step)
            with np.errstate(invalid="ignore"):  # non-finite inputs are caught by the model
                x = x / np.maximum(x.sum(axis=2, keepdims=True), 1.0)
        return x

    def inputs(self, x: np.ndarray, dtype=np.float32) -> np.ndarray:
        x = self._base(x)
        if self.x_mean:
            m = np.asarray(self.x_mean)[None, :, None, None]
            s = np.asarray(self.x_std)[None, :, None, None]
            x = (x - m) / s
        return x.astype(dtype)

    def targets(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def restore(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.y_std + self.y_mean


def fit_normalizer(x: np.ndarray, y: np.ndarray, cfg: ModelConfig, kind: str = "image") -> Normalizer:
    norm = Normalizer(kind=kind)
    if cfg.standardize_inputs and len(x):
        base = norm._base(x)
        norm.x_mean = [float(v) for v in base.mean(axis=(0, 2, 3))]
        norm.x_std = [float(v) if v > 0 else 1.0 for v in base.std(axis=(0, 2, 3))]
    if cfg.standardize_targets and len(y):
        norm.y_mean = float(np.mean(y))
        sd = float(np.std(y))
        norm.y_std = sd if sd > 0 else 1.0
    return norm


# -- data ---------------------------------------------------------------------------


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray
    ids: list[str]

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class Splits:
    train: Split
    val: Split
    test: Split
    kind: str = "image"
    gsd_m: float | None = None

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "Splits":
        parts = {s: Split(*ds.arrays(s)) for s in ("train", "val", "test")}
        return cls(**parts, kind=ds.meta.get("kind", "image"), gsd_m=ds.meta.get("gsd_m"))

    def check(self, cfg: ModelConfig) -> None:
        if not len(self.train) or not len(self.val):
            raise ContractError(f"training needs non-empty train and val splits (got {len(self.train)}, {len(self.val)})")
        shape = self.train.x.shape[1:]
        want = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if shape != want:
            raise ConfigError(f"dataset samples are {shape} but preset {cfg.preset!r} expects {want}")


# -- training -----------------------------------------------------------------------


@dataclass
class TrainState:
    epoch: int = 0
    best_val_loss: float = math.inf
    bad_epochs: int = 0
    steps: int = 0
    gate: OperatorGateState | None = None
    shuffle_seed: tuple[int, int] = (0, 1)


@dataclass
class TrainResult:
    model: DFYP
    normalizer: Normalizer
    history: list[dict]
    gate_rows: list[dict]
    best_epoch: int
    best_operator: str | None
    stop_reason: str
    state: TrainState


def predict(model: DFYP, x: np.ndarray, norm: Normalizer, batch_size: int = 64) -> np.ndarray:
    """Eval-mode predictions in target units, float64."""
    model.eval()
    dtype = model.parameters()[0].dtype
    out = []
    with no_grad():
        for start in range(0, len(x), batch_size):
            xb = Tensor(norm.inputs(x[start : start + batch_size], dtype), dtype=dtype)
            out.append(model(xb).data.astype(np.float64))
    z = np.concatenate(out) if out else np.zeros(0)
    return norm.restore(z)


def _epoch_record(model: DFYP, epoch, train_loss, val_loss, val_rmse, seconds, shuffle_seed) -> dict:
    rec = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_rmse": val_rmse}
    coeffs = model.coefficients()
    for key in ("alpha", "beta", "gamma", "lambda"):
        if key in coeffs:
            rec[key] = coeffs[key]
    rec["selected_operator"] = model.edge.operator if model.edge is not None else None
    rec["seconds"] = round(seconds, 3)
    rec["shuffle_seed"] = list(shuffle_seed)
    return rec


def train(
    cfg: ModelConfig,
    splits: Splits,
    out_dir=None,
    model: DFYP | None = None,
    verbose: bool = False,
) -> TrainResult:
    """Joint end-to-end training with Adam, the operator gate and early stopping.

    Each epoch the gate fixes the edge operator, minibatches run over a seeded
    shuffle, then the validation pass feeds -RMSE back to the gate.  The
    parameters, buffers and operator of the best validation epoch are
    restored before returning.  With ``out_dir`` the epoch log, gate log,
    checkpoint and config snapshot are written there.
    """
    splits.check(cfg)
    if model is None:
        model = DFYP(cfg, np.random.default_rng(cfg.seed))
    norm = fit_normalizer(splits.train.x, splits.train.y, cfg, splits.kind)
    dtype = model.parameters()[0].dtype
    x_train = norm.inputs(splits.train.x, dtype)
    y_train = norm.targets(splits.train.y).astype(dtype)

    state = TrainState(shuffle_seed=(cfg.seed, 1))
    if model.uses_gate:
        state.gate = OperatorGateState(warmup=cfg.gate_warmup)
    shuffle_rng = np.random.default_rng(list(state.shuffle_seed))
    dropout_rng = np.random.default_rng([cfg.seed, 2])
    opt = Adam(model.parameters(), lr=cfg.lr)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(to_text(cfg))
        log_fh = open(out / "epochs.jsonl", "w")

    history: list[dict] = []
    gate_rows: list[dict] = []
    best = (model.state_dict(), model.buffer_dict(), model.edge.operator if model.edge else None, -1)
    stop_reason = "epochs"
    n = len(y_train)
    try:
        for epoch in range(cfg.epochs):
            state.epoch = epoch
            t0 = time.perf_counter()
            if state.gate is not None:
                model.set_operator(gate_select(state.gate, epoch))
            model.train()
            perm = shuffle_rng.permutation(n)
            total = 0.0
            seen = 0
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                idx = perm[start : start + cfg.batch_size]
                opt.zero_grad()
                try:
                    pred = model(Tensor(x_train[idx], dtype=dtype), dropout_rng)
                    loss = mse_loss(pred, y_train[idx])
                    loss.backward()
                except NumericError as exc:
                    raise NumericError(f"non-finite value at epoch {epoch}, batch {b}: {exc}") from exc
                opt.step()
                total += float(loss.data) * len(idx)
                seen += len(idx)
                state.steps += 1
                if state.steps >= cfg.max_steps:
                    break
            train_loss = total / seen
            val_pred = predict(model, splits.val.x, norm, max(cfg.batch_size, 64))
            val_rmse = metrics(val_pred, splits.val.y).rmse
            val_loss = float(np.mean((norm.targets(val_pred) - norm.targets(splits.val.y)) ** 2))
            if not math.isfinite(val_loss):
                raise NumericError(f"non-finite validation loss at epoch {epoch}")
            op = model.edge.operator if model.edge is not None else None
            if state.gate is not None:
                gate_score_update(state.gate, op, -val_rmse)
            if model.edge is not None:
                row = {"epoch": epoch, "selected_operator": op, "lambda": model.edge.learnable.lam}
                if state.gate is not None:
                    for k in POOL:
                        row[f"score_{k}"] = state.gate.score(k)
                gate_rows.append(row)

            if val_loss < state.best_val_loss:
                state.best_val_loss = val_loss
                state.bad_epochs = 0
                best = (model.state_dict(), model.buffer_dict(), op, epoch)
            else:
                state.bad_epochs += 1
            rec = _epoch_record(model, epoch, train_loss, val_loss, val_rmse, time.perf_counter() - t0, state.shuffle_seed)
            history.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if verbose:
                print(f"epoch {epoch:3d} train {train_loss:.4f} val {val_loss:.4f} rmse {val_rmse:.4f} op {op}")
            if state.bad_epochs >= cfg.patience:
                stop_reason = "patience"
                break
            if state.steps >= cfg.max_steps:
                stop_reason = "step_budget"
                break
    finally:
        if log_fh is not None:
            log_fh.close()

    params, buffers, best_op, best_epoch = best
    model.load_state_dict(params, buffers)
    if best_op is not None:
        model.set_operator(best_op)
    model.eval()
    result = TrainResult(model, norm, history, gate_rows, best_epoch, best_op, stop_reason, state)
    if out is not None:
        if gate_rows:
            write_gate_log(out / "gate.csv", gate_rows)
        save_model(result, out / "checkpoint")
    return result


# -- checkpoints --------------------------------------------------------------------


def save_model(result: TrainResult, directory) -> Path:
    model = result.model
    extra = {
        "config": to_text(model.cfg),
        "normalizer": asdict(result.normalizer),
        "operator": result.best_operator,
        "best_epoch": result.best_epoch,
    }
    path = dten.save_checkpoint(directory, model.state_dict(), model.buffer_dict(), extra)
    (Path(directory) / "config.txt").write_text(extra["config"])
    return path


def load_model(directory) -> tuple[DFYP, Normalizer]:
    """Rebuild the model from its config snapshot and load the stored tensors.

    A tensor whose shape disagrees with the rebuilt model raises ConfigError
    listing every differing entry.
    """
    from .config import resolve

    params, buffers, extra = dten.load_checkpoint(directory)
    if "config" not in extra:
        raise ConfigError(f"checkpoint {directory} carries no config snapshot")
    cfg = resolve(extra["config"])
    model = DFYP(cfg, np.random.default_rng(cfg.seed))
    expected = {k: v.shape for k, v in model.state_dict().items()}
    diffs = [f"{k}: checkpoint {params[k].shape} vs model {s}" for k, s in expected.items() if k in params and params[k].shape != s]
    diffs += [f"{k}: missing from checkpoint" for k in expected if k not in params]
    diffs += [f"{k}: not in model" for k in params if k not in expected]
    if diffs:
        raise ConfigError("checkpoint does not match its config:\n  " + "\n  ".join(diffs))
    model.load_state_dict(params, buffers)
    if extra.get("operator") and model.edge is not None:
        model.set_operator(extra["operator"])
    model.eval()
    return model, Normalizer(**extra.get("normalizer", {}))


# -- evaluation ---------------------------------------------------------------------


def evaluate(model: DFYP, norm: Normalizer, split: Split) -> tuple[MetricsReport, list[tuple]]:
    """Metrics and per-sample rows, processed in sample_id order."""
    order = sorted(range(len(split.ids)), key=lambda i: split.ids[i])
    x = split.x[order]
    y = split.y[order]
    preds = predict(model, x, norm)
    rows = [(split.ids[i], float(t), float(p), float(p - t)) for i, t, p in zip(order, y, preds)]
    return metrics(preds, y), rows


def _fmt(v) -> str:
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header, rows) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def report_row(key: str, seed: int, m: MetricsReport) -> tuple:
    return (key, seed, m.rmse, m.mae, m.r2, m.n)


# -- multi-run jobs -----------------------------------------------------------------


@dataclass
class Job:
    key: str
    seed: int
    cfg: ModelConfig
    out_dir: str | None = None


@dataclass
class JobResult:
    key: str
    seed: int
    report: MetricsReport | None
    error: str | None = None


def run_job(job: Job, splits: Splits) -> JobResult:
    try:
        result = train(job.cfg, splits, job.out_dir)
        report, rows = evaluate(result.model, result.normalizer, splits.test)
        if job.out_dir is not None:
            write_csv(Path(job.out_dir) / "errors.csv", ERROR_FIELDS, rows)
        return JobResult(job.key, job.seed, report)
    except NumericError as exc:
        return JobResult(job.key, job.seed, None, f"numeric: {exc}")
    except (ConfigError, ContractError, ValueError) as exc:
        return JobResult(job.key, job.seed, None, f"{type(exc).__name__}: {exc}")


def _run_one(args):
    return run_job(*args)


def run_jobs(jobs: list[Job], splits: Splits, workers: int = 1) -> list[JobResult]:
    """Run jobs, concurrently when ``workers > 1``; results keep job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [run_job(j, splits) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, [(j, splits) for j in jobs]))


def seed_list(base_seed: int, n_seeds: int) -> list[int]:
    return [base_seed + k for k in range(n_seeds)]


def ablate(
    cfg: ModelConfig,
    splits: Splits,
    variants=tuple(VARIANT_PARTS),
    seeds=(0,),
    out_dir=None,
    workers: int = 1,
) -> list[JobResult]:
    """Train each variant under each seed with the shared protocol; test metrics per run."""
    jobs = []
    for variant in variants:
        for seed in seeds:
            sub = str(Path(out_dir) / variant / f"seed{seed}") if out_dir is not None else None
            op = cfg.operator if VARIANT_PARTS[variant][3] else "aol"
            jobs.append(Job(variant, seed, cfg.replace(variant=variant, seed=seed, operator=op), sub))
    return run_jobs(jobs, splits, workers)


def operator_bench(
    cfg: ModelConfig,
    splits: Splits,
    operators=BENCH_OPERATORS,
    seeds=(0,),
    out_dir=None,
    workers: int = 1,
) -> list[JobResult]:
    """Full model with each fixed operator pinned, plus one adaptive (gated) run."""
    jobs = []
    for op in operators:
        for seed in seeds:
            sub = str(Path(out_dir) / op / f"seed{seed}") if out_dir is not None else None
            jobs.append(Job(op, seed, cfg.replace(variant="full", operator=op, seed=seed), sub))
    return run_jobs(jobs, splits, workers)
