"""Command-line entry point.

Output layout for ``run`` (root = ``$T2MAC_OUTPUT_ROOT`` joined with the
config's ``output_dir``, or ``--out``)::

    <root>/<env>/<variant>/config.json        resolved config echo
    <root>/<env>/<variant>/summary.csv        one row per seed
    <root>/<env>/<variant>/seed_<s>/metrics.csv
    <root>/<env>/<variant>/seed_<s>/final.ckpt
    <root>/<env>/<variant>/seed_<s>/run.json

Exit codes: 0 ok, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import metrics
from .config import ConfigError, RunConfig, load_config, parse_override
from .envs import make_env
from .neural import load_checkpoint
from .trainer import evaluate, train

OUTPUT_ROOT_ENV = "T2MAC_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("t2mac")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError("arguments", message)


def _overrides(pairs) -> dict:
    return dict(parse_override(p) for p in pairs or ())


def resolve_config(args) -> RunConfig:
    overrides = _overrides(args.set)
    if args.config:
        return load_config(args.config, overrides)
    return RunConfig.from_dict(overrides, required=("env",))


def run_root(cfg: RunConfig, out: str | None = None) -> Path:
    if out is not None:
        return Path(out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / cfg.output_dir


def _run_seed(cfg: RunConfig, seed: int, seed_dir: str) -> metrics.RunSummary:
    res = train(cfg, seed, seed_dir)
    summary = metrics.RunSummary(
        cfg.env, cfg.variant, seed, cfg.episodes, res.final.success,
        res.final.comm_rate, res.final.mean_uncertainty,
    )
    (Path(seed_dir) / "run.json").write_text(summary.to_json())
    return summary


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    base = run_root(cfg, args.out) / cfg.env / cfg.variant
    base.mkdir(parents=True, exist_ok=True)
    (base / "config.json").write_text(cfg.dumps())
    dirs = [str(base / f"seed_{s}") for s in cfg.seeds]
    if args.workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            summaries = list(pool.map(_run_seed, [cfg] * len(dirs), cfg.seeds, dirs))
    else:
        summaries = [_run_seed(cfg, s, d) for s, d in zip(cfg.seeds, dirs)]
    metrics.write_rows(base / "summary.csv", metrics.SUMMARY_FIELDS,
                       [{k: getattr(s, k) for k in metrics.SUMMARY_FIELDS} for s in summaries])
    for s in summaries:
        print(f"{cfg.env} {cfg.variant} seed {s.seed}: success {s.final_success:.3f} "
              f"comm_rate {s.comm_rate:.3f}")
    print(f"outputs in {base}")
    return EXIT_OK


def cmd_eval(args) -> int:
    seed_dir = Path(args.run_dir)
    summary = metrics.load_run_dir(seed_dir)
    cfg_path = seed_dir.parent / "config.json"
    cfg = load_config(cfg_path) if cfg_path.is_file() else RunConfig(env=summary.env, variant=summary.variant)
    net, _ = load_checkpoint(seed_dir / "final.ckpt")
    seeds = np.random.default_rng(args.seed).integers(2**31, size=args.episodes)
    threshold = cfg.gate_threshold if args.threshold is None else args.threshold
    res = evaluate(net, make_env(summary.env), summary.variant, seeds, threshold)
    print(json.dumps({"env": summary.env, "variant": summary.variant, "seed": summary.seed,
                      "episodes": args.episodes, "threshold": threshold,
                      "success": res.success, "comm_rate": res.comm_rate,
                      "mean_uncertainty": res.mean_uncertainty}, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    comm_runs = [metrics.load_run_dir(p) for p in metrics.find_runs(args.comm)]
    base_runs = [metrics.load_run_dir(p) for p in metrics.find_runs(args.nocomm)]
    rep = metrics.efficiency_report(comm_runs, base_runs)
    out = sys.stdout if args.out is None else open(args.out, "w", newline="")
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(metrics.REPORT_FIELDS)
        w.writerow([metrics._fmt(rep.row()[k]) for k in metrics.REPORT_FIELDS])
    finally:
        if out is not sys.stdout:
            out.close()
    if rep.guarded:
        print("warning: no-communication baseline is zero; improvement uses the 1e-6 guard",
              file=sys.stderr)
    return EXIT_OK


def cmd_export_curves(args) -> int:
    points = []
    for d in metrics.find_runs(args.paths):
        s = metrics.load_run_dir(d)
        points.extend(metrics.points_from_metrics(d / "metrics.csv", s.env, s.variant, s.seed))
    long_rows, bands = metrics.curve_export(points)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_rows(out / "curves.csv", metrics.CURVE_FIELDS, long_rows)
    metrics.write_rows(out / "bands.csv", metrics.BAND_FIELDS, bands)
    print(f"wrote {len(long_rows)} points and {len(bands)} bands to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="t2mac", description="Evidence-based selective communication for cooperative MARL")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="train every seed of a config")
    r.add_argument("--config", help="JSON config file")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (JSON value)")
    r.add_argument("--out", help=f"output root (default ${OUTPUT_ROOT_ENV}/output_dir)")
    r.add_argument("--workers", type=int, default=1, help="parallel seed workers")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="greedy evaluation of a trained seed directory")
    e.add_argument("run_dir")
    e.add_argument("--episodes", type=int, default=32)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--threshold", type=float, default=None, help="gate threshold on p")
    e.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="communication-efficiency report")
    rp.add_argument("--comm", nargs="+", required=True, help="run directories of the communicating method")
    rp.add_argument("--nocomm", nargs="+", required=True, help="run directories without communication")
    rp.add_argument("--out", help="CSV file (default stdout)")
    rp.set_defaults(func=cmd_report)

    c = sub.add_parser("export-curves", help="plot-ready long-format curves and bands")
    c.add_argument("paths", nargs="+")
    c.add_argument("--out", required=True, help="directory for curves.csv and bands.csv")
    c.set_defaults(func=cmd_export_curves)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
