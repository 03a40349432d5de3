"""Rolling-window train/predict/evaluate loop behind the command line."""

from __future__ import annotations

import csv
import io
import logging
import platform
import time
from dataclasses import dataclass, replace

import numpy as np
import scipy

from . import __version__
from .admm import TrainResult, partition, train
from .config import RunConfig, default_hyperparams
from .data import TimeSeriesDataset, generate, load_csv, mape, rmse, rolling_windows
from .fusion import FusedPrediction, predict_fused, split_validation
from .gp import estimate_noise

__all__ = [
    "WindowModel",
    "load_series",
    "fit_window",
    "forecast",
    "run_experiment",
    "aggregate",
    "predictions_csv",
    "run_bench",
]

log = logging.getLogger(__name__)


def load_series(cfg: RunConfig) -> TimeSeriesDataset:
    if cfg["data.source"] == "csv":
        return load_csv(cfg["data.path"], impute=cfg["data.impute"])
    return generate(cfg.synthetic_spec())


@dataclass
class WindowModel:
    """Everything needed to forecast from one trained window."""

    offset: float  # training-window mean removed before fitting
    shards: list
    validation: tuple
    result: TrainResult
    train_seconds: float


def fit_window(cfg: RunConfig, times, values, workers: int | None = None, use_toeplitz: bool | None = None,
               validation_points: int | None = None) -> WindowModel:
    """Center one training window, hold out validation points and run ADMM."""
    m = cfg["fusion.validation_points"] if validation_points is None else validation_points
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    offset = float(np.mean(values))
    (t_fit, y_fit), (t_val, y_val) = split_validation(times, values - offset, m)
    admm_cfg = cfg.admm_config(workers=workers, use_toeplitz=use_toeplitz)
    noise = estimate_noise(y_fit) if cfg["gp.noise"] == "auto" else float(cfg["gp.noise"])
    init = default_hyperparams(cfg, y_fit, noise)
    spec = cfg.kernel_spec()
    t0 = time.perf_counter()
    result = train(t_fit, y_fit, admm_cfg, spec, init=init, noise=noise)
    seconds = time.perf_counter() - t0
    shards = partition(t_fit, y_fit, admm_cfg)
    return WindowModel(offset, shards, (t_val, y_val), result, seconds)


def forecast(cfg: RunConfig, model: WindowModel, test_times, strategy: str | None = None,
             concatenate: bool | None = None, use_toeplitz: bool | None = None) -> FusedPrediction:
    """Fused prediction at ``test_times``, shifted back by the window mean."""
    out = predict_fused(
        model.result.hp,
        model.shards,
        model.validation,
        test_times,
        cfg.kernel_spec(),
        strategy=cfg["fusion.strategy"] if strategy is None else strategy,
        concatenate=cfg["fusion.concatenate"] if concatenate is None else concatenate,
        use_toeplitz=cfg["gp.toeplitz"] if use_toeplitz is None else use_toeplitz,
        mirror_iterations=cfg["fusion.mirror_iterations"],
        threads=cfg["run.threads"],
    )
    # expert means in out.locals stay centered; callers add model.offset
    return replace(out, mean=out.mean + model.offset)


def _windows(cfg: RunConfig, n: int):
    repeats = cfg["window.repeats"] or None
    return list(rolling_windows(n, cfg["window.train_len"], cfg["window.horizon"], cfg["window.step"], repeats))


def run_experiment(cfg: RunConfig, dataset: TimeSeriesDataset | None = None, progress=None) -> dict:
    """Run every window sequentially; one failing window does not stop the run.

    Returns the report dictionary; per-point predictions are under
    ``report["points"]`` (removed by the writer before serialization).
    """
    dataset = load_series(cfg) if dataset is None else dataset
    times, values = dataset.times, dataset.values
    stamps = dataset.timestamps()
    windows = _windows(cfg, len(dataset))
    records, points = [], []
    for w, (trn, tst) in enumerate(windows):
        entry = {"window": w, "train_start": trn.start, "test_start": tst.start}
        try:
            model = fit_window(cfg, times[trn], values[trn])
            t0 = time.perf_counter()
            fused = forecast(cfg, model, times[tst])
            predict_seconds = time.perf_counter() - t0
        except Exception as exc:  # recorded per window; the run goes on
            log.warning("window %d failed: %s", w, exc)
            entry.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            records.append(entry)
            continue
        truth = values[tst]
        res = model.result
        last = res.state.history[-1]
        entry.update(
            status="ok",
            admm_status=res.status,
            rounds=res.rounds,
            scalars_exchanged=res.state.scalars_exchanged,
            final_primal=float(np.max(last.primal)),
            final_dual=float(last.dual),
            eps_pri=float(last.eps_pri),
            eps_dual=float(last.eps_dual),
            noise=res.noise,
            hyperparameters=res.hp.to_dict(),
            beta=np.asarray(fused.beta).tolist() if np.ndim(fused.beta) == 1 else "per-point",
            dropped_experts=list(fused.dropped),
            train_wall_seconds=model.train_seconds,
            train_parallel_seconds=res.parallel_seconds,
            predict_seconds=predict_seconds,
            rmse=rmse(fused.mean, truth),
            mape=mape(fused.mean, truth),
        )
        records.append(entry)
        beta = np.asarray(fused.beta)
        for h, idx in enumerate(range(tst.start, tst.stop)):
            b = beta[:, h] if beta.ndim == 2 else beta
            points.append((w, h + 1, idx, stamps[idx].isoformat(), float(truth[h]), float(fused.mean[h]),
                           float(fused.variance[h]), tuple(b.tolist()),
                           tuple((fused.locals.means[:, h] + model.offset).tolist()),
                           tuple(fused.locals.variances[:, h].tolist())))
        if progress is not None:
            progress(w, len(windows), entry)

    report = {
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "seed": cfg["run.seed"],
        "config": cfg.to_text(),
        "windows": records,
        "n_windows": len(windows),
        "n_failed": sum(r["status"] == "failed" for r in records),
    }
    report.update(aggregate(points, cfg["window.horizon"]))
    ok = [r for r in records if r["status"] == "ok"]
    report["timing"] = {
        "train_wall_seconds": float(sum(r["train_wall_seconds"] for r in ok)),
        "train_parallel_seconds": float(sum(r["train_parallel_seconds"] for r in ok)),
        "predict_seconds": float(sum(r["predict_seconds"] for r in ok)),
    }
    report["admm"] = {
        "mean_rounds": float(np.mean([r["rounds"] for r in ok])) if ok else None,
        "converged_windows": sum(r["admm_status"] == "converged" for r in ok),
        "scalars_exchanged": int(sum(r["scalars_exchanged"] for r in ok)),
    }
    report["points"] = points
    return report


def aggregate(points, horizon: int) -> dict:
    """Per-horizon-step and overall RMSE/MAPE from per-point rows.

    Each row starts ``(window, step, index, timestamp, truth, prediction, ...)``.
    """
    if not points:
        return {"rmse": None, "mape": None, "rmse_by_step": [], "mape_by_step": []}
    steps = np.array([p[1] for p in points])
    truth = np.array([p[4] for p in points])
    pred = np.array([p[5] for p in points])
    by_rmse, by_mape = [], []
    for h in range(1, horizon + 1):
        sel = steps == h
        by_rmse.append(rmse(pred[sel], truth[sel]) if sel.any() else None)
        by_mape.append(mape(pred[sel], truth[sel]) if sel.any() else None)
    return {"rmse": rmse(pred, truth), "mape": mape(pred, truth), "rmse_by_step": by_rmse, "mape_by_step": by_mape}


def _join(values) -> str:
    return ";".join(repr(float(v)) for v in values)


def predictions_csv(points) -> str:
    """Per-point CSV; the last three columns list one value per surviving expert."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["window", "step", "index", "timestamp", "truth", "prediction", "variance", "beta",
                     "expert_means", "expert_variances"])
    for w, h, idx, ts, truth, pred, var, beta, means, variances in points:
        writer.writerow([w, h, idx, ts, repr(truth), repr(pred), repr(var), _join(beta), _join(means),
                         _join(variances)])
    return buf.getvalue()


def run_bench(cfg: RunConfig, dataset: TimeSeriesDataset | None = None) -> dict:
    """Time training and prediction on one identical workload for every K in the sweep.

    The workload is the first window of the plan. Training time is the
    critical path (slowest worker per round plus the coordinator).
    """
    dataset = load_series(cfg) if dataset is None else dataset
    windows = _windows(cfg, len(dataset))
    if not windows:
        raise ValueError("the window plan yields no windows for this series")
    trn, tst = windows[0]
    times, values = dataset.times, dataset.values
    runs = []
    sweep = [(k, cfg["gp.toeplitz"]) for k in cfg["bench.workers"]]
    if cfg["bench.compare_dense"]:
        sweep += [(1, not cfg["gp.toeplitz"])]
    for k, toeplitz in sweep:
        model = fit_window(cfg, times[trn], values[trn], workers=k, use_toeplitz=toeplitz)
        t0 = time.perf_counter()
        fused = forecast(cfg, model, times[tst], use_toeplitz=toeplitz)
        predict_seconds = time.perf_counter() - t0
        runs.append({
            "workers": k,
            "toeplitz": toeplitz,
            "train_seconds": model.result.parallel_seconds,
            "train_wall_seconds": model.train_seconds,
            "predict_seconds": predict_seconds,
            "rounds": model.result.rounds,
            "admm_status": model.result.status,
            "rmse": rmse(fused.mean, values[tst]),
        })
    main = [r for r in runs if r["toeplitz"] == cfg["gp.toeplitz"]]
    times_k = [r["train_seconds"] for r in main]
    monotone = all(b <= 1.10 * a for a, b in zip(times_k, times_k[1:]))
    out = {"train_len": trn.stop - trn.start, "runs": runs, "monotone_within_10pct": monotone}
    if cfg["bench.compare_dense"]:
        tp = next((r for r in runs if r["workers"] == 1 and r["toeplitz"]), None)
        dn = next((r for r in runs if r["workers"] == 1 and not r["toeplitz"]), None)
        if tp is not None and dn is not None:
            out["toeplitz_faster_at_k1"] = tp["train_seconds"] < dn["train_seconds"]
    return out
