"""Command-line entry point: ``mcnf <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, parse_methods, parse_seeds
from .datasets import PRESETS, generate_romano
from .errors import ConfigError, DimensionError, McnfError
from .experiments import (
    SWEEP_AXES,
    emit_plot_data,
    evaluate_methods,
    fit_mcnf,
    make_dataset,
    run_benchmark,
    run_fit_quality_study,
    run_sweep,
    synthetic_params,
    train_base,
)

log = logging.getLogger("mcnf")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_PARTIAL = 3


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI file with [dqr] [mcd] [flow] [mcnf] [conformal] [dataset] [run] sections")
    p.add_argument("--seed", type=int, help="run a single seed")
    p.add_argument("--seeds", help="seed list, e.g. 0-9 or 1,4,7")
    p.add_argument("--dataset", help="synthetic preset name or path to a CSV file")
    p.add_argument("--target", help="target column when --dataset is a CSV file")
    p.add_argument("--methods", help="comma-separated subset of DQR,MCQR,MCD,CQR,MCCP,MCNF,NF")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcnf", description="MC-dropout + spline-flow uncertainty benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-base", help="train and checkpoint the quantile network per seed")
    _common(p)

    p = sub.add_parser("benchmark", help="evaluate every method over the seed list")
    _common(p)

    p = sub.add_parser("sweep", help="repeat the benchmark over values of one setting")
    _common(p)
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated values")

    p = sub.add_parser("fit-quality", help="well-trained vs underfitted base network")
    _common(p)
    p.add_argument("--candidates", type=int, default=15)
    p.add_argument("--long-epochs", type=int, default=100)
    p.add_argument("--short-epochs", type=int, default=6)

    p = sub.add_parser("synth-gen", help="write a synthetic dataset as CSV")
    _common(p)
    p.add_argument("-n", type=int, help="number of observations")

    p = sub.add_parser("plot-data", help="per-x sample/KDE files, the interval band and quick-look PNGs")
    _common(p)
    p.add_argument("--grid", help="comma-separated x values (original scale)")
    p.add_argument("--grid-points", type=int, default=5, help="evenly spaced grid over the data range")
    p.add_argument("--no-render", action="store_true", help="skip the PNG figures")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    over = {}
    if args.dataset:
        if args.dataset in PRESETS:
            over["dataset"] = {"name": args.dataset, "csv": ""}
        elif Path(args.dataset).suffix.lower() == ".csv":
            over["dataset"] = {"name": Path(args.dataset).stem, "csv": args.dataset,
                               "target": args.target or cfg.dataset.target}
        else:
            over["dataset"] = {"name": args.dataset}
    elif args.target:
        over["dataset"] = {"target": args.target}
    if args.seeds:
        over["seeds"] = parse_seeds(args.seeds)
    if args.seed is not None:
        over["seeds"] = (args.seed,)
    if args.methods:
        over["methods"] = parse_methods(args.methods)
    if args.out:
        over["out"] = args.out
    cfg = cfg.with_overrides(**over)
    if not cfg.dataset.csv:
        synthetic_params(cfg)  # fail fast on incomplete synthetic settings
    return cfg


def _print_table(table):
    cols = ("coverage", "width", "mae", "mae_q")
    print("method," + ",".join(f"{c},{c}_std" for c in cols) + ",n_seeds")
    for method, cell in table.items():
        vals = ",".join(f"{cell[c]:.4f},{cell[c + '_std']:.4f}" for c in cols)
        print(f"{method},{vals},{cell['n_seeds']}")


def cmd_train_base(cfg: RunConfig, args) -> dict:
    out = Path(cfg.out)
    for seed in cfg.seeds:
        data = make_dataset(cfg, seed)
        net = train_base(cfg, data, seed)
        path = out / cfg.dataset.name / str(seed) / "dqr.ckpt"
        path.parent.mkdir(parents=True, exist_ok=True)
        net.save(path)
        print(f"{seed},{path},{net.parameter_hash()[:16]}")
    return {}


def cmd_benchmark(cfg: RunConfig, args) -> dict:
    res = run_benchmark(cfg, cfg.out)
    _print_table(res.table)
    return res.errors


def cmd_sweep(cfg: RunConfig, args) -> dict:
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse sweep values {args.values!r}") from None
    if args.axis != "tau":
        values = [int(v) for v in values]
    results = run_sweep(cfg, args.axis, values, cfg.out)
    errors = {}
    for value, res in results.items():
        print(f"# {args.axis}={value:g}")
        _print_table(res.table)
        errors.update({f"{args.axis}={value:g}/seed={s}": e for s, e in res.errors.items()})
    return errors


def cmd_fit_quality(cfg: RunConfig, args) -> dict:
    res = run_fit_quality_study(cfg, args.candidates, args.long_epochs, args.short_epochs, cfg.out)
    for tag, bench in (("well-trained", res.well), ("underfitted", res.under)):
        print(f"# {tag}")
        _print_table(bench.table)
    return res.well.errors


def cmd_synth_gen(cfg: RunConfig, args) -> dict:
    if cfg.dataset.csv:
        raise ConfigError("synth-gen needs a synthetic dataset, not a CSV path")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    n = args.n or cfg.dataset.n
    for seed in cfg.seeds:
        data = generate_romano(synthetic_params(cfg), n, np.random.default_rng(seed), name=cfg.dataset.name)
        path = out / f"{cfg.dataset.name}_seed{seed}.csv"
        tmp = path.with_name(path.name + ".tmp")
        data.to_csv(tmp)
        tmp.replace(path)
        print(path)
    return {}


def cmd_plot_data(cfg: RunConfig, args) -> dict:
    seed = cfg.seeds[0]
    data = make_dataset(cfg, seed)
    if data.n_features != 1:
        raise DimensionError(f"plot data needs a single predictor, got {data.n_features}")
    if args.grid:
        grid = np.array([float(v) for v in args.grid.split(",")])
    else:
        lo, hi = data.x[:, 0].min(), data.x[:, 0].max()
        grid = np.linspace(lo, hi, args.grid_points + 2)[1:-1]
    net = train_base(cfg, data, seed)
    model = fit_mcnf(cfg, net, data, seed)
    result = evaluate_methods(cfg, data, net, seed, methods=("MCNF",), model=model)
    out = Path(cfg.out) / cfg.dataset.name / str(seed) / "plot-data"
    for path in emit_plot_data(result, grid, out, seed=seed, render=not args.no_render):
        print(path)
    return {}


COMMANDS = {
    "train-base": cmd_train_base,
    "benchmark": cmd_benchmark,
    "sweep": cmd_sweep,
    "fit-quality": cmd_fit_quality,
    "synth-gen": cmd_synth_gen,
    "plot-data": cmd_plot_data,
}


def _fail(code, kind, message, **extra):
    print(json.dumps({"status": "error", "error": kind, "message": message, **extra}, sort_keys=True),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        errors = COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        return _fail(EXIT_USAGE, "ConfigError", str(exc))
    except (McnfError, ValueError, RuntimeError, FloatingPointError, OSError) as exc:
        return _fail(EXIT_FAILED, type(exc).__name__, str(exc))
    if errors:
        return _fail(EXIT_PARTIAL, "SeedFailures", f"{len(errors)} run(s) failed",
                     failures={str(k): v for k, v in errors.items()})
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
