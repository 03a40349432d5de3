"""Command-line harness: ``simulate``, ``run``, ``bench`` and ``validate``.

Exit codes: 0 success, 1 a validate check failed, 2 configuration error,
3 every window of a run failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import ConfigError, RunConfig, load_config
from .data import DataError, save_csv
from .oracles import format_table, run_suite
from .pipeline import load_series, predictions_csv, run_bench, run_experiment

log = logging.getLogger("scalegp")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_ALL_FAILED = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat 'section.key = value' config file")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--threads", type=int, help="overrides run.threads (concurrent workers)")
    common.add_argument("--out", metavar="DIR", help="overrides run.out")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set admm.workers=4 (repeatable)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="scalegp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write the synthetic series as CSV")
    sub.add_parser("run", parents=[common], help="rolling-window train/predict/evaluate")
    sub.add_parser("bench", parents=[common], help="training/prediction time over a worker sweep")
    v = sub.add_parser("validate", parents=[common], help="run the oracle self-check suite")
    v.add_argument("--tolerance-scale", type=float, default=1.0,
                   help="multiply every check tolerance (values << 1 force failures)")
    return p


def build_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"run.threads={args.threads}")
    if args.out is not None:
        overrides.append(f"run.out={args.out}")
    return load_config(args.config, overrides)


def _write(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def cmd_simulate(cfg: RunConfig) -> int:
    if cfg["data.source"] != "synth":
        raise ConfigError("simulate needs data.source = synth")
    os.makedirs(cfg["run.out"], exist_ok=True)
    path = os.path.join(cfg["run.out"], "series.csv")
    ds = load_series(cfg)
    save_csv(ds, path)
    print(f"wrote {len(ds)} points to {path}")
    return EXIT_OK


def _summary(report: dict) -> str:
    lines = [
        f"windows: {report['n_windows']} ({report['n_failed']} failed)",
        f"rmse: {report['rmse']}",
        f"mape: {report['mape']}",
    ]
    if report["rmse_by_step"]:
        lines.append("step  rmse  mape")
        for h, (r, m) in enumerate(zip(report["rmse_by_step"], report["mape_by_step"]), start=1):
            lines.append(f"{h}  {r:.6g}  {m:.6g}")
    adm = report["admm"]
    lines.append(f"admm: mean rounds {adm['mean_rounds']}, converged windows {adm['converged_windows']}, "
                 f"scalars exchanged {adm['scalars_exchanged']}")
    tm = report["timing"]
    lines.append(f"time: train {tm['train_parallel_seconds']:.3f}s critical path "
                 f"({tm['train_wall_seconds']:.3f}s wall), predict {tm['predict_seconds']:.3f}s")
    return "\n".join(lines) + "\n"


def cmd_run(cfg: RunConfig) -> int:
    out = cfg["run.out"]
    os.makedirs(out, exist_ok=True)

    def progress(w, total, entry):
        log.info("window %d/%d rmse %.4g (%s, %d rounds)", w + 1, total, entry["rmse"], entry["admm_status"],
                 entry["rounds"])

    report = run_experiment(cfg, progress=progress)
    points = report.pop("points")
    _write(os.path.join(out, "predictions.csv"), predictions_csv(points))
    _write(os.path.join(out, "report.json"), json.dumps(report, indent=2, sort_keys=True) + "\n")
    summary = _summary(report)
    _write(os.path.join(out, "summary.txt"), summary)
    sys.stdout.write(summary)
    if report["n_windows"] and report["n_failed"] == report["n_windows"]:
        return EXIT_ALL_FAILED
    return EXIT_OK


def cmd_bench(cfg: RunConfig) -> int:
    out = cfg["run.out"]
    os.makedirs(out, exist_ok=True)
    res = run_bench(cfg)
    _write(os.path.join(out, "bench.json"), json.dumps(res, indent=2, sort_keys=True) + "\n")
    print(f"{'K':>3} {'path':>9} {'train_s':>9} {'predict_s':>9} {'rounds':>6}  status")
    for r in res["runs"]:
        path = "toeplitz" if r["toeplitz"] else "dense"
        print(f"{r['workers']:>3} {path:>9} {r['train_seconds']:9.3f} {r['predict_seconds']:9.3f} "
              f"{r['rounds']:>6}  {r['admm_status']}")
    print(f"training time non-increasing in K (10% band): {res['monotone_within_10pct']}")
    if "toeplitz_faster_at_k1" in res:
        print(f"toeplitz faster than dense at K=1: {res['toeplitz_faster_at_k1']}")
    return EXIT_OK


def cmd_validate(cfg: RunConfig, tolerance_scale: float) -> int:
    results = run_suite(seed=cfg["run.seed"], tolerance_scale=tolerance_scale)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "bench":
            return cmd_bench(cfg)
        return cmd_validate(cfg, args.tolerance_scale)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
