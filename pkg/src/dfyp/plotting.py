"""Report figures written straight to image files (Agg backend, no display)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.8),
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
    "font.size": 9.0,
    "font.family": "sans-serif",
    "axes.linewidth": 0.8,
    "axes.titlesize": "medium",
    "axes.labelsize": "medium",
    "axes.grid": True,
    "grid.alpha": 0.3,
    "grid.linewidth": 0.5,
    "lines.linewidth": 1.4,
    "lines.markersize": 4,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "xtick.labelsize": "small",
    "ytick.labelsize": "small",
    "legend.fontsize": "small",
    "legend.frameon": False,
    "svg.hashsalt": "dfyp",
}

METRIC_LABELS = {"rmse": "RMSE", "mae": "MAE", "r2": "R$^2$"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _by_key(rows, metric):
    """rows of (key, seed, rmse, mae, r2, n) -> {key: [(seed, value)]}, keeping key order."""
    col = {"rmse": 2, "mae": 3, "r2": 4}[metric]
    out: dict[str, list[tuple[int, float]]] = {}
    for row in rows:
        value = row[col]
        out.setdefault(row[0], []).append((row[1], np.nan if value is None else float(value)))
    return out


def metric_bars(rows, metric: str, path, title: str = "") -> Path:
    """Bar of the across-seed mean per variant with the individual seeds overlaid."""
    groups = _by_key(rows, metric)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        keys = list(groups)
        xs = np.arange(len(keys))
        means = [np.nanmean([v for _, v in groups[k]]) if groups[k] else np.nan for k in keys]
        ax.bar(xs, means, width=0.6, color="#9ecae1", edgecolor="#3182bd", zorder=2)
        for x, k in zip(xs, keys):
            vals = [v for _, v in groups[k]]
            ax.plot(np.full(len(vals), x), vals, "o", color="#08519c", zorder=3)
        ax.set_xticks(xs, keys, rotation=20)
        ax.set_ylabel(METRIC_LABELS.get(metric, metric))
        ax.set_title(title or f"{METRIC_LABELS.get(metric, metric)} by variant")
        return _save(fig, path)


def metric_lines(rows, metric: str, path, title: str = "") -> Path:
    """One line per operator across seeds (the fixed-operator comparison layout)."""
    groups = _by_key(rows, metric)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for key, pts in groups.items():
            pts = sorted(pts)
            style = dict(color="k", linewidth=2.2, marker="s") if key == "aol" else dict(marker="o", alpha=0.8)
            ax.plot([s for s, _ in pts], [v for _, v in pts], label=key, **style)
        ax.set_xlabel("seed")
        ax.set_ylabel(METRIC_LABELS.get(metric, metric))
        ax.set_title(title or f"{METRIC_LABELS.get(metric, metric)} per operator")
        ax.legend(ncol=3)
        return _save(fig, path)


def loss_curve(history: list[dict], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = [h["epoch"] for h in history]
        ax.plot(epochs, [h["train_loss"] for h in history], label="train")
        ax.plot(epochs, [h["val_loss"] for h in history], label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("MSE (standardised target)")
        ax.legend()
        return _save(fig, path)


def report_figures(rows, out_dir, prefix: str, kind: str = "bars") -> list[Path]:
    draw = metric_bars if kind == "bars" else metric_lines
    return [draw(rows, m, Path(out_dir) / f"{prefix}_{m}.png") for m in ("rmse", "mae", "r2")]


def prediction_scatter(rows, path, title: str = "") -> Path:
    """Predicted against observed yield from errors.csv rows, with the identity line."""
    truth = np.array([float(r[1]) for r in rows])
    pred = np.array([float(r[2]) for r in rows])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 4.0))
        ax.plot(truth, pred, "o", color="#3182bd", alpha=0.6, zorder=3)
        if len(truth):
            lo, hi = min(truth.min(), pred.min()), max(truth.max(), pred.max())
            ax.plot([lo, hi], [lo, hi], "k--", linewidth=0.8, zorder=2)
        ax.set_xlabel("observed")
        ax.set_ylabel("predicted")
        ax.set_title(title or "test predictions")
        return _save(fig, path)
