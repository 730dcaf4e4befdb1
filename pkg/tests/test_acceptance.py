"""Acceptance criteria, each at its stated tolerance.

The synthetic benchmark and drift runs train real models and take several
minutes in total; the conftest hook prints one PASS/FAIL line per criterion.
"""
import json
import math
import time

import numpy as np
import pytest

from dfyp.cli import main
from dfyp.config import preset
from dfyp.data.dataset import load_dataset
from dfyp.data.pipeline import SpectralStack, apply_mask, bands_per_year, build_mask, histogram_transform
from dfyp.data.synth import SyntheticSpec, calibrate_noise, least_squares_r2, synth_generate
from dfyp.edge_ops import POOL, TIE_PRIORITY, LearnableKernel, apply_operator, classical_kernels, one_hot
from dfyp.metrics import metrics
from dfyp.model import DFYP
from dfyp.tensor import Tensor, no_grad
from dfyp.trainer import Split, Splits, ablate, evaluate, operator_bench, train

from gradcheck import F32_TOL, F64_TOL, check
from test_gradcheck import PRIMITIVES, model_gradient_errors

pytestmark = pytest.mark.acceptance


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    """The modis-like synthetic benchmark, generated through the CLI (seed 7, n 2500)."""
    out = tmp_path_factory.mktemp("benchmark") / "data"
    assert main(["synth", "--preset", "modis-like", "--n", "2500", "--seed", "7", "--target-r2", "0.9", "--out", str(out)]) == 0
    return load_dataset(out)


@pytest.fixture(scope="session")
def benchmark_splits(benchmark):
    return Splits.from_dataset(benchmark)


def test_criterion_01_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    for name, (fn, arrays) in PRIMITIVES.items():
        err32, err64, n = check(fn, arrays, rng, n=100)
        assert n >= min(100, sum(np.size(a) for a in arrays)), name
        assert err64 <= F64_TOL and err32 <= F32_TOL, (name, err32, err64)
    err32, err64, n, _ = model_gradient_errors()
    assert n >= 100 and err64 <= F64_TOL and err32 <= F32_TOL
    assert time.perf_counter() - start < 120


def test_criterion_02_learnable_endpoints_bit_equal():
    ops = classical_kernels()
    k = LearnableKernel()
    rng = np.random.default_rng(2)
    for _ in range(20):
        x = Tensor(rng.standard_normal((1, 9, 16, 16)).astype(np.float32))
        assert np.array_equal(apply_operator(x, k.kernel(1.0)).data, apply_operator(x, ops["sobel"]).data)
        assert np.array_equal(apply_operator(x, k.kernel(0.0)).data, apply_operator(x, ops["scharr"]).data)


def _replay_choice(history, epoch):
    """Independent re-derivation of the gate decision from logged epochs."""
    if epoch < len(POOL):
        return POOL[epoch]
    scores = {op: [-h["val_rmse"] for h in history[:epoch] if h["selected_operator"] == op] for op in POOL}
    means = {op: math.fsum(v) / len(v) for op, v in scores.items() if v}
    top = max(means.values())
    return next(op for op in TIE_PRIORITY if op in means and means[op] == top)


def test_criterion_03_one_hot_gate_over_50_epochs(benchmark_splits):
    s = benchmark_splits
    small = Splits(
        Split(s.train.x[:200], s.train.y[:200], s.train.ids[:200]),
        Split(s.val.x[:50], s.val.y[:50], s.val.ids[:50]),
        s.test,
        kind=s.kind,
    )
    result = train(preset("toy", epochs=50, patience=50), small)
    assert len(result.history) == 50
    log = result.state.gate.log
    assert [e for e, _ in log] == list(range(50))
    for epoch, op in log:
        assert sum(one_hot(op).values()) == 1
        assert op == _replay_choice(result.history, epoch)
    assert [op for _, op in log[:3]] == ["sobel", "scharr", "learnable"]


def test_criterion_04_gamma_one_bypasses_operator():
    model = DFYP(preset("toy")).eval()
    model.edge.gamma_pin = 1.0
    x = Tensor(np.random.default_rng(4).random((4, 9, 32, 32)).astype(np.float32))
    outs = []
    for op in POOL:
        model.set_operator(op)
        with no_grad():
            outs.append(model.cnn(x).data)
    assert max(float(np.max(np.abs(o - outs[0]))) for o in outs) == 0.0


def test_criterion_05_band_formula():
    assert bands_per_year(9, 8) == 405


def test_criterion_06_histogram_conservation():
    rng = np.random.default_rng(6)
    ranges = np.tile([0.0, 1.0], (9, 1))
    for _ in range(100):
        data = rng.normal(0.5, 0.4, (45, 9, 16, 16))
        lc = rng.integers(1, 4, (16, 16))
        lc[0, 0] = 1
        stack = apply_mask(SpectralStack(data), build_mask(lc, {1}))
        h = histogram_transform(stack, ranges)
        assert np.array_equal(h.hist.sum(axis=1).astype(np.int64), h.valid_counts)
        assert np.all(h.valid_counts == int((lc == 1).sum()))


def _loop_metrics(p, t):
    n = len(p)
    sq = ab = mean_t = 0.0
    for a, b in zip(p, t):
        sq += (a - b) * (a - b)
        ab += abs(a - b)
        mean_t += b
    mean_t /= n
    tot = 0.0
    for b in t:
        tot += (b - mean_t) * (b - mean_t)
    return math.sqrt(sq / n), ab / n, 1.0 - sq / tot


def test_criterion_07_metrics_oracle():
    rng = np.random.default_rng(7)
    p, t = rng.normal(50, 10, 1000), rng.normal(50, 10, 1000)
    m = metrics(p, t)
    for got, ref in zip((m.rmse, m.mae, m.r2), _loop_metrics(list(p), list(t))):
        assert abs(got - ref) <= 1e-9 * abs(ref)
    perfect = metrics(t, t)
    assert (perfect.rmse, perfect.mae, perfect.r2) == (0.0, 0.0, 1.0)
    assert abs(metrics(np.full(1000, t.mean()), t).r2) <= 1e-12


def test_criterion_08_synthetic_end_to_end(benchmark, benchmark_splits):
    assert benchmark.split_counts() == {"train": 2000, "val": 250, "test": 250}
    oracle = least_squares_r2(benchmark)
    assert 0.85 <= oracle <= 0.95, oracle
    start = time.perf_counter()
    result = train(preset("toy", variant="full", seed=7), benchmark_splits)
    report, _ = evaluate(result.model, result.normalizer, benchmark_splits.test)
    elapsed = time.perf_counter() - start
    print(f"\nfull toy model: test r2 {report.r2:.4f} (least-squares oracle {oracle:.4f}) in {elapsed:.0f}s")
    assert report.r2 >= 0.8
    assert elapsed < 600


def test_criterion_09_ablation_ordering(benchmark_splits):
    runs = ablate(preset("toy"), benchmark_splits, variants=("full", "cnn", "vit"), seeds=range(5))
    rmse = {}
    for r in runs:
        assert r.error is None, r.error
        rmse.setdefault(r.key, []).append(r.report.rmse)
    med = {k: float(np.median(v)) for k, v in rmse.items()}
    print(f"\nmedian test rmse over 5 seeds: {med}")
    assert med["full"] <= med["cnn"] and med["full"] <= med["vit"]


def test_criterion_10_operator_drift():
    spec = SyntheticSpec(seed=11, tile_size=16, drift=True, edge_weight=20.0, band_weights=(5.0, 5.0, -5.0), field_count=(2, 6))
    spec.noise = calibrate_noise(spec, 0.9, preset="sentinel-like")
    splits = Splits.from_dataset(synth_generate(spec, 500, "sentinel-like"))
    cfg = preset("toy", in_channels=3, image_size=16, patch_size=4, gsd_m=10.0)
    runs = operator_bench(cfg, splits, seeds=range(3))
    rmse = {}
    for r in runs:
        assert r.error is None, r.error
        rmse.setdefault(r.key, []).append(r.report.rmse)
    mean = {k: float(np.mean(v)) for k, v in rmse.items()}
    best_fixed = min(v for k, v in mean.items() if k != "aol")
    allowance = 0.05 * float(np.std(splits.test.y))
    print(f"\naol {mean['aol']:.4f} best fixed {best_fixed:.4f} allowance {allowance:.4f}")
    assert mean["aol"] <= best_fixed + allowance


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.suffix in (".csv", ".dten", ".json")}


def test_criterion_11_determinism(tmp_path):
    def run_all(tag):
        base = tmp_path / tag
        data = base / "data"
        cmds = [
            ["synth", "--preset", "modis-like", "--n", "60", "--seed", "3", "--noise", "0.5", "--out", str(data)],
            ["train", "--data", str(data), "--epochs", "3", "--seed", "2", "--out", str(base / "train")],
            ["eval", "--checkpoint", str(base / "train" / "checkpoint"), "--data", str(data), "--out", str(base / "eval")],
            ["ablate", "--data", str(data), "--variants", "cnn,full", "--seeds", "2", "--epochs", "2", "--out", str(base / "ablate")],
            ["operator-bench", "--data", str(data), "--operators", "sobel,aol", "--epochs", "2", "--out", str(base / "bench")],
        ]
        for cmd in cmds:
            assert main(cmd) == 0, cmd
        return _files(base)

    first, second = run_all("a"), run_all("b")
    assert first.keys() == second.keys()
    assert any(k.endswith(".dten") and "checkpoint" in k for k in first)
    differing = [k for k in first if first[k] != second[k]]
    assert not differing, differing


def _conv_widths(model):
    return [b.conv.weight.shape[0] for b in model.cnn.backbone.blocks]


def test_criterion_12_preset_fidelity():
    m = DFYP(preset("modis"))
    assert _conv_widths(m) == [128, 256, 256, 512, 512, 512]
    assert m.cnn.backbone.cfg.feature_dim == 512 and m.cnn.head.weight.shape == (512, 1)
    assert [b.conv.stride for b in m.cnn.backbone.blocks] == [1, 2, 1, 2, 1, 2]
    v = m.vit
    assert (v.cfg.image_size, v.cfg.patch_size) == (32, 4)
    assert len(v.blocks) == 4 and all(b.heads == 8 for b in v.blocks)
    assert v.embed.pos.shape == (64, 256) and v.blocks[0].ffn1.weight.shape == (256, 512)

    s = DFYP(preset("sentinel2"))
    assert _conv_widths(s) == [32, 64, 128, 128]
    assert [b.conv.stride for b in s.cnn.backbone.blocks] == [2, 2, 2, 1]
    v = s.vit
    assert (v.cfg.image_size, v.cfg.patch_size) == (256, 16)
    assert len(v.blocks) == 6 and all(b.heads == 6 for b in v.blocks)
    assert v.embed.pos.shape == (256, 128) and v.blocks[0].ffn1.weight.shape == (128, 256)
