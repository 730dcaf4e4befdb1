import csv
import json
import math
import shutil
import subprocess
import sys

import numpy as np
import pytest

from dfyp import dten
from dfyp.cli import main
from dfyp.config import preset
from dfyp.data.synth import SyntheticSpec, export_raw_tiles
from dfyp.model import DFYP


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth") / "data"
    assert main(["synth", "--preset", "modis-like", "--n", "40", "--seed", "7", "--noise", "0.5", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("train") / "run"
    assert main(["train", "--preset", "toy", "--data", str(data_dir), "--epochs", "3", "--seed", "1", "--out", str(out)]) == 0
    return out


# -- synth --------------------------------------------------------------------------


def test_synth_counts_and_files(data_dir):
    manifest = json.loads((data_dir / "manifest.json").read_text())
    splits = [e["split"] for e in manifest["entries"]]
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (32, 4, 4)
    assert len(read_csv(data_dir / "labels.csv")) == 40
    assert len(read_csv(data_dir / "features.csv")) == 40


def test_synth_seed_repeat_identical(tmp_path, data_dir):
    again = tmp_path / "again"
    assert main(["synth", "--preset", "modis-like", "--n", "40", "--seed", "7", "--noise", "0.5", "--out", str(again)]) == 0
    assert (again / "manifest.json").read_bytes() == (data_dir / "manifest.json").read_bytes()


def test_synth_rejects_empty(tmp_path, capsys):
    assert main(["synth", "--n", "0", "--out", str(tmp_path / "x")]) == 2
    assert "empty dataset" in capsys.readouterr().err
    assert main(["synth", "--preset", "landsat", "--n", "3", "--out", str(tmp_path / "y")]) == 2


def test_dfyp_out_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("DFYP_OUT", str(tmp_path / "root"))
    assert main(["synth", "--preset", "sentinel-like", "--tile-size", "16", "--n", "5", "--noise", "0"]) == 0
    assert (tmp_path / "root" / "synth" / "manifest.json").exists()


# -- preprocess ---------------------------------------------------------------------


def test_preprocess_fixture_tiles(tmp_path):
    raw = export_raw_tiles(SyntheticSpec(seed=2), 10, tmp_path / "raw")
    out1, out2 = tmp_path / "p1", tmp_path / "p2"
    assert main(["preprocess", "--input", str(raw), "--out", str(out1)]) == 0
    assert main(["preprocess", "--input", str(raw), "--out", str(out2)]) == 0
    m1 = json.loads((out1 / "manifest.json").read_text())
    m2 = json.loads((out2 / "manifest.json").read_text())
    assert [e["checksum"] for e in m1["entries"]] == [e["checksum"] for e in m2["entries"]]
    for e in m1["entries"]:
        hist = dten.load(out1 / e["tensor_path"])
        crop = int((dten.load(raw / "tiles" / e["sample_id"] / "landcover.dten") == 1).sum())
        assert np.all(hist.sum(axis=1) == crop)


def test_preprocess_missing_dir(tmp_path, capsys):
    missing = tmp_path / "nope"
    assert main(["preprocess", "--input", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_preprocess_no_usable_tiles(tmp_path):
    raw = export_raw_tiles(SyntheticSpec(seed=2), 4, tmp_path / "raw")
    assert main(["preprocess", "--input", str(raw), "--crop-classes", "9", "--out", str(tmp_path / "o")]) == 2


# -- train --------------------------------------------------------------------------


def test_train_outputs(trained):
    rows = read_csv(trained / "report.csv")
    assert list(rows[0]) == ["variant", "seed", "rmse", "mae", "r2", "n"]
    assert rows[0]["variant"] == "full" and rows[0]["seed"] == "1" and rows[0]["n"] == "4"
    assert all(math.isfinite(float(rows[0][k])) for k in ("rmse", "mae", "r2"))
    gate = read_csv(trained / "gate.csv")
    assert [r["selected_operator"] for r in gate] == ["sobel", "scharr", "learnable"]
    assert len((trained / "epochs.jsonl").read_text().splitlines()) == 3
    assert (trained / "loss.png").stat().st_size > 0
    assert (trained / "predictions.png").stat().st_size > 0
    assert (trained / "checkpoint" / "manifest.json").exists()
    errors = read_csv(trained / "errors.csv")
    assert [r["sample_id"] for r in errors] == sorted(r["sample_id"] for r in errors)


def test_train_is_byte_deterministic(tmp_path, data_dir):
    outs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        assert main(["train", "--data", str(data_dir), "--epochs", "2", "--seed", "4", "--out", str(out)]) == 0
        outs.append(out)
    for name in ("report.csv", "errors.csv", "gate.csv", "config.txt"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    assert tree_bytes(outs[0] / "checkpoint") == tree_bytes(outs[1] / "checkpoint")


def test_zero_lr_checkpoint_equals_initialisation(tmp_path, data_dir):
    out = tmp_path / "lr0"
    assert main(["train", "--data", str(data_dir), "--epochs", "2", "--lr", "0", "--seed", "3", "--out", str(out)]) == 0
    params, _, _ = dten.load_checkpoint(out / "checkpoint")
    init = DFYP(preset("toy", seed=3, lr=0.0, epochs=2)).state_dict()
    assert set(params) == set(init)
    for name, value in init.items():
        assert params[name].tobytes() == value.tobytes(), name


def test_cnn_variant_logs_without_fusion_weights(tmp_path, data_dir):
    out = tmp_path / "cnn"
    assert main(["train", "--data", str(data_dir), "--variant", "cnn", "--epochs", "2", "--out", str(out)]) == 0
    for line in (out / "epochs.jsonl").read_text().splitlines():
        rec = json.loads(line)
        assert "alpha" not in rec and "beta" not in rec


def test_config_file_and_set_overrides(tmp_path, data_dir):
    cfg = tmp_path / "run.txt"
    cfg.write_text("preset = toy\nepochs = 1\nvit_dim = 8\n")
    out = tmp_path / "c"
    assert main(["train", "--config", str(cfg), "--set", "vit_mlp=8", "--data", str(data_dir), "--out", str(out)]) == 0
    snap = (out / "config.txt").read_text()
    assert "vit_dim = 8" in snap and "vit_mlp = 8" in snap and "epochs = 1" in snap


def test_usage_errors_exit_2(tmp_path, data_dir, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.txt"), "--data", str(data_dir)]) == 2
    assert main(["train", "--set", "colour=red", "--data", str(data_dir), "--out", str(tmp_path / "a")]) == 2
    assert main(["train", "--data", str(tmp_path / "nodata"), "--out", str(tmp_path / "b")]) == 2
    assert main(["train", "--preset", "sentinel2", "--data", str(data_dir), "--out", str(tmp_path / "c")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["train", "--variant", "bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["train", "--workers", "0"])
    assert exc.value.code == 2


def test_numeric_failure_exit_3(tmp_path, data_dir, capsys):
    bad = tmp_path / "bad"
    shutil.copytree(data_dir, bad)
    manifest = json.loads((bad / "manifest.json").read_text())
    first_train = next(e for e in manifest["entries"] if e["split"] == "train")
    path = bad / first_train["tensor_path"]
    arr = dten.load(path)
    arr[0, 0, 0] = np.inf
    first_train["checksum"] = dten.save(path, arr)
    (bad / "manifest.json").write_text(json.dumps(manifest))
    assert main(["train", "--data", str(bad), "--epochs", "1", "--out", str(tmp_path / "o")]) == 3
    assert "numeric" in capsys.readouterr().err


@pytest.mark.slow
def test_modis_preset_smoke(tmp_path):
    data = tmp_path / "d"
    assert main(["synth", "--preset", "modis-like", "--n", "20", "--seed", "7", "--noise", "0.5", "--out", str(data)]) == 0
    out = tmp_path / "m"
    assert main(["train", "--variant", "full", "--preset", "modis", "--epochs", "50", "--data", str(data), "--out", str(out)]) == 0
    row = read_csv(out / "report.csv")[0]
    assert all(math.isfinite(float(row[k])) for k in ("rmse", "mae", "r2"))


# -- ablate / operator-bench ----------------------------------------------------------


def test_ablate_thirty_rows_and_figures(tmp_path, data_dir):
    out = tmp_path / "abl"
    assert main(["ablate", "--data", str(data_dir), "--epochs", "1", "--seeds", "5", "--out", str(out)]) == 0
    rows = read_csv(out / "report.csv")
    assert len(rows) == 30
    assert [r["variant"] for r in rows[::5]] == ["cnn", "vit", "fusion", "fusion+rca", "fusion+aol", "full"]
    assert [r["seed"] for r in rows[:5]] == ["0", "1", "2", "3", "4"]
    for metric in ("rmse", "mae", "r2"):
        assert (out / f"ablation_{metric}.png").stat().st_size > 0
    assert not (out / "failures.csv").exists()


def test_operator_bench_nine_rows(tmp_path, data_dir):
    out = tmp_path / "bench"
    assert main(["operator-bench", "--data", str(data_dir), "--epochs", "2", "--out", str(out)]) == 0
    rows = read_csv(out / "report.csv")
    assert list(rows[0])[0] == "operator"
    assert [r["operator"] for r in rows] == ["sobel", "canny", "kirsch", "laplacian", "log", "prewitt", "roberts", "scharr", "aol"]
    gate = read_csv(out / "sobel" / "seed0" / "gate.csv")
    assert gate and all(r["selected_operator"] == "sobel" for r in gate)
    for metric in ("rmse", "mae", "r2"):
        assert (out / f"operators_{metric}.png").stat().st_size > 0


def test_ablate_records_failures_and_continues(tmp_path, data_dir):
    out = tmp_path / "abl"
    # a 5-pixel patch cannot tile a 32x32 image: only the ViT variant fails
    code = main(["ablate", "--data", str(data_dir), "--variants", "cnn,vit", "--set", "patch_size=5", "--epochs", "1", "--out", str(out)])
    assert code == 0
    assert [r["variant"] for r in read_csv(out / "report.csv")] == ["cnn"]
    failures = read_csv(out / "failures.csv")
    assert [(f["variant"], f["seed"]) for f in failures] == [("vit", "0")]
    assert "patch" in failures[0]["error"]
    assert main(["ablate", "--data", str(data_dir), "--variants", "cnn,nope", "--out", str(out)]) == 2


# -- eval ---------------------------------------------------------------------------


def test_eval_aggregates_exactly(tmp_path, trained, data_dir):
    out = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(trained / "checkpoint"), "--data", str(data_dir), "--out", str(out)]) == 0
    report = read_csv(out / "report.csv")[0]
    errors = np.array([float(r["error"]) for r in read_csv(out / "errors.csv")])
    assert float(report["rmse"]) == math.sqrt(math.fsum(errors**2) / len(errors))
    assert float(report["mae"]) == math.fsum(np.abs(errors)) / len(errors)
    assert (out / "report.csv").read_bytes() == (trained / "report.csv").read_bytes()
    assert (out / "predictions.png").stat().st_size > 0


def test_eval_order_invariant(tmp_path, trained, data_dir):
    shuffled = tmp_path / "shuffled"
    shutil.copytree(data_dir, shuffled)
    manifest = json.loads((shuffled / "manifest.json").read_text())
    manifest["entries"] = manifest["entries"][::-1]
    (shuffled / "manifest.json").write_text(json.dumps(manifest))
    a, b = tmp_path / "a", tmp_path / "b"
    for data, out in ((data_dir, a), (shuffled, b)):
        assert main(["eval", "--checkpoint", str(trained / "checkpoint"), "--data", str(data), "--split", "train", "--out", str(out)]) == 0
    assert (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()
    assert (a / "errors.csv").read_bytes() == (b / "errors.csv").read_bytes()


def test_eval_checkpoint_mismatch(tmp_path, trained, data_dir, capsys):
    ck = tmp_path / "ck"
    shutil.copytree(trained / "checkpoint", ck)
    manifest = json.loads((ck / "manifest.json").read_text())
    manifest["extra"]["config"] = manifest["extra"]["config"].replace("vit_mlp = 32", "vit_mlp = 48")
    (ck / "manifest.json").write_text(json.dumps(manifest))
    assert main(["eval", "--checkpoint", str(ck), "--data", str(data_dir), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "ffn1.weight" in err and "(16, 48)" in err
    assert main(["eval", "--checkpoint", str(tmp_path / "none"), "--data", str(data_dir)]) == 2


def test_console_script_help():
    exe = shutil.which("dfyp")
    cmd = [exe] if exe else [sys.executable, "-m", "dfyp.cli"]
    res = subprocess.run(cmd + ["--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "operator-bench" in res.stdout
    res = subprocess.run(cmd, capture_output=True, text=True)
    assert res.returncode == 2
