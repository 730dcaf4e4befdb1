"""``dfyp`` command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
Outputs go to ``--out``; without it, to ``$DFYP_OUT/<command>`` (default
root ``dfyp_out``).
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import config as config_mod
from .config import OPERATORS, VARIANTS
from .errors import DFYPError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    """Bad invocation that argparse cannot catch (paths, empty requests)."""


def _out_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("DFYP_OUT", "dfyp_out")) / command


def _overrides(pairs) -> dict:
    values = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise config_mod.ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        values.update(config_mod.parse_text(f"{key} = {raw}"))
    return values


def resolve_config(args, **fixed) -> config_mod.ModelConfig:
    text = ""
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        text = path.read_text()
    overrides = _overrides(getattr(args, "set", None))
    for key in ("variant", "operator", "seed", "epochs", "lr"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    overrides.update(fixed)
    return config_mod.resolve(text, getattr(args, "preset", None), **overrides)


def _load_splits(path):
    from .data.dataset import load_dataset
    from .trainer import Splits

    if path is None:
        raise UsageError("--data is required")
    if not Path(path).exists():
        raise UsageError(f"dataset not found: {path}")
    return Splits.from_dataset(load_dataset(path))


# -- commands -----------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    from .data.tiles import preprocess_directory

    in_dir = Path(args.input)
    if not in_dir.is_dir():
        raise UsageError(f"input directory not found: {in_dir}")
    out = _out_dir(args, "preprocess")
    crop = [int(c) for c in args.crop_classes.split(",") if c.strip()]
    res = preprocess_directory(
        in_dir, out, crop, args.bins, args.steps, args.trim, args.seed or 0, workers=args.workers
    )
    for sid, reason in res.unusable:
        print(f"unusable tile {sid}: {reason}", file=sys.stderr)
    if res.unusable:
        out.mkdir(parents=True, exist_ok=True)
        (out / "unusable.txt").write_text("".join(f"{sid}\t{reason}\n" for sid, reason in res.unusable))
    if res.manifest is None:
        print("preprocess produced no usable samples", file=sys.stderr)
        return EXIT_USAGE
    counts = res.dataset.split_counts()
    print(f"wrote {len(res.dataset)} samples ({counts}) to {res.manifest}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .data.synth import PRESETS, SyntheticSpec, calibrate_noise, save_synthetic, synth_generate

    preset = args.preset or "modis-like"
    if preset not in PRESETS:
        raise UsageError(f"unknown synthetic preset {preset!r}; expected one of {PRESETS}")
    if args.n < 1:
        raise UsageError("--n must be at least 1: refusing to write an empty dataset")
    spec = SyntheticSpec(seed=args.seed or 0, edge_weight=args.edge_weight, drift=args.drift)
    if args.tile_size:
        spec.tile_size = args.tile_size
    if args.noise is not None:
        if args.noise < 0:
            raise UsageError("--noise must be non-negative")
        spec.noise = args.noise
    else:
        spec.noise = calibrate_noise(spec, args.target_r2, preset=preset)
    ds = synth_generate(spec, args.n, preset, workers=args.workers)
    out = _out_dir(args, "synth")
    path = save_synthetic(ds, out)
    print(f"wrote {len(ds)} samples {ds.split_counts()} (noise {spec.noise:.6g}) to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import loss_curve, prediction_scatter
    from .trainer import REPORT_FIELDS, evaluate, report_row, train, write_csv

    cfg = resolve_config(args)
    splits = _load_splits(args.data)
    out = _out_dir(args, "train")
    result = train(cfg, splits, out, verbose=args.verbose)
    report, rows = evaluate(result.model, result.normalizer, splits.test if len(splits.test) else splits.val)
    write_csv(out / "report.csv", REPORT_FIELDS, [report_row(cfg.variant, cfg.seed, report)])
    write_csv(out / "errors.csv", ("sample_id", "truth", "prediction", "error"), rows)
    if result.history:
        loss_curve(result.history, out / "loss.png")
    prediction_scatter(rows, out / "predictions.png", title=f"{cfg.variant}, seed {cfg.seed}")
    print(f"{cfg.variant} seed {cfg.seed}: rmse {report.rmse:.4f} mae {report.mae:.4f} r2 {report.r2_text()} n {report.n}")
    return EXIT_OK


def _multi(args, command: str, runner, key_name: str, keys, figure_kind: str, prefix: str) -> int:
    from .config import to_text
    from .plotting import report_figures
    from .trainer import BENCH_FIELDS, REPORT_FIELDS, report_row, seed_list, write_csv

    cfg = resolve_config(args)
    splits = _load_splits(args.data)
    out = _out_dir(args, command)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(to_text(cfg))
    seeds = seed_list(cfg.seed, args.seeds)
    results = runner(cfg, splits, keys, seeds, out, args.workers)
    rows = [report_row(r.key, r.seed, r.report) for r in results if r.report is not None]
    failures = [(r.key, r.seed, r.error) for r in results if r.report is None]
    write_csv(out / "report.csv", BENCH_FIELDS if key_name == "operator" else REPORT_FIELDS, rows)
    if failures:
        write_csv(out / "failures.csv", (key_name, "seed", "error"), failures)
        for key, seed, err in failures:
            print(f"{key_name} {key} seed {seed} failed: {err}", file=sys.stderr)
    if rows:
        report_figures(rows, out, prefix, figure_kind)
    print(f"{len(rows)} runs reported, {len(failures)} failed -> {out / 'report.csv'}")
    if not rows:
        numeric = all(err.startswith("numeric") for _, _, err in failures)
        return EXIT_NUMERIC if numeric else EXIT_USAGE
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .trainer import ablate

    variants = tuple(args.variants.split(",")) if args.variants else VARIANTS
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variant(s) {bad}; expected from {VARIANTS}")
    return _multi(args, "ablate", ablate, "variant", variants, "bars", "ablation")


def cmd_operator_bench(args) -> int:
    from .trainer import BENCH_OPERATORS, operator_bench

    ops = tuple(args.operators.split(",")) if args.operators else BENCH_OPERATORS
    bad = [o for o in ops if o not in OPERATORS]
    if bad:
        raise UsageError(f"unknown operator(s) {bad}; expected from {OPERATORS}")
    return _multi(args, "operator-bench", operator_bench, "operator", ops, "lines", "operators")


def cmd_eval(args) -> int:
    from .plotting import prediction_scatter
    from .trainer import ERROR_FIELDS, REPORT_FIELDS, Split, evaluate, load_model, report_row, write_csv

    ckpt = Path(args.checkpoint)
    if not (ckpt / "manifest.json").exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model, norm = load_model(ckpt)
    splits = _load_splits(args.data)
    split: Split = getattr(splits, args.split)
    if not len(split):
        raise UsageError(f"split {args.split!r} of {args.data} is empty")
    cfg = model.cfg
    want = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if split.x.shape[1:] != want:
        raise config_mod.ConfigError(f"dataset samples are {split.x.shape[1:]} but the checkpoint expects {want}")
    report, rows = evaluate(model, norm, split)
    out = _out_dir(args, "eval")
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "errors.csv", ERROR_FIELDS, rows)
    write_csv(out / "report.csv", REPORT_FIELDS, [report_row(cfg.variant, cfg.seed, report)])
    prediction_scatter(rows, out / "predictions.png", title=f"{cfg.variant}, {args.split} split")
    print(f"{args.split}: rmse {report.rmse:.4f} mae {report.mae:.4f} r2 {report.r2_text()} n {report.n}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value run configuration file")
    common.add_argument("--preset", metavar="NAME", help="model preset (toy, modis, sentinel2); synth: modis-like or sentinel-like")
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--operator", choices=OPERATORS, help="pin an edge operator instead of the adaptive gate")
    common.add_argument("--seed", type=int, help="seed (base seed for multi-seed commands)")
    common.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds for ablate/operator-bench")
    common.add_argument("--epochs", type=int)
    common.add_argument("--lr", type=float, help="Adam learning rate")
    common.add_argument("--out", metavar="DIR", help="output directory (default $DFYP_OUT/<command>)")
    common.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("--data", metavar="DIR", help="dataset directory or manifest.json")

    parser = argparse.ArgumentParser(prog="dfyp", description="Dual-branch crop-yield regression harness.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="raw tiles -> histogram dataset")
    p.add_argument("--input", required=True, metavar="DIR")
    p.add_argument("--crop-classes", default="1")
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--trim", type=float, default=0.01)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic benchmark")
    p.add_argument("--n", type=int, default=2500)
    p.add_argument("--noise", type=float, help="label noise sigma (default: calibrated to --target-r2)")
    p.add_argument("--target-r2", type=float, default=0.9)
    p.add_argument("--edge-weight", type=float, default=20.0)
    p.add_argument("--tile-size", type=int)
    p.add_argument("--drift", action="store_true", help="switch the edge feature from Sobel to Laplacian halfway")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", parents=[common], help="train every variant over seeds")
    p.add_argument("--variants", help="comma-separated subset of variants")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("operator-bench", parents=[common], help="fixed operators vs the adaptive gate")
    p.add_argument("--operators", help="comma-separated subset (default: 8 fixed + aol)")
    p.set_defaults(func=cmd_operator_bench)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, metavar="DIR")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.workers < 1 or args.seeds < 1:
        parser.error("--workers and --seeds must be at least 1")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"dfyp: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, DFYPError, FileNotFoundError) as exc:
        print(f"dfyp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
