import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from scalegp import cli
from scalegp.config import ConfigError, RunConfig, load_config, parse_text
from scalegp.pipeline import aggregate

SMALL = [
    "synth.length=400",
    "window.train_len=60",
    "window.horizon=2",
    "window.step=30",
    "window.repeats=2",
    "admm.workers=2",
    "admm.max_rounds=3",
    "gp.max_iter=15",
    "gp.init_l2_lt=100",
]


def small_args(tmp_path, *extra):
    args = ["--out", str(tmp_path)]
    for item in SMALL + list(extra):
        args += ["--set", item]
    return args


def test_defaults_and_round_trip():
    cfg = RunConfig()
    assert cfg["admm.rho"] == 1.0 and cfg["fusion.strategy"] == "qp" and cfg["gp.max_iter"] == 200
    again = parse_text(cfg.to_text())
    assert again.values == cfg.values
    bench = load_config("docs/bench.cfg")
    assert parse_text(bench.to_text()).values == bench.values


def test_parse_and_override_order():
    cfg = parse_text("admm.workers = 2  # comment\n\nfusion.strategy = softmax\n", ["admm.workers=4"])
    assert cfg["admm.workers"] == 4 and cfg["fusion.strategy"] == "softmax"
    assert cfg.with_overrides(**{"admm.rho": 2.5})["admm.rho"] == 2.5
    assert cfg.admm_config().workers == 4
    assert cfg.synthetic_spec().seed == cfg["run.seed"]


@pytest.mark.parametrize(
    "text",
    [
        "admm.nope = 1",
        "admm.workers = two",
        "admm.workers",
        "admm.rho = -1",
        "fusion.strategy = vote",
        "fusion.strategy = qp\nfusion.validation_points = 3",
        "data.source = csv",
        "kernel.terms = weekly,quadratic",
        "gp.toeplitz = maybe",
        "window.train_len = 10\nadmm.workers = 8",
    ],
)
def test_rejects_bad_config(text):
    with pytest.raises(ConfigError):
        parse_text(text)


def test_unknown_key_in_constructor():
    with pytest.raises(ConfigError):
        RunConfig({"made.up": 1})


def test_missing_config_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/file.cfg")


def test_simulate_is_idempotent(tmp_path, capsys):
    assert cli.main(["simulate"] + small_args(tmp_path / "a")) == 0
    assert cli.main(["simulate"] + small_args(tmp_path / "b")) == 0
    a = (tmp_path / "a" / "series.csv").read_bytes()
    assert a == (tmp_path / "b" / "series.csv").read_bytes()
    assert len(a.splitlines()) == 401


def test_simulate_zero_amplitude(tmp_path):
    args = small_args(tmp_path, "synth.weekly_amp=0", "synth.daily_amp=0", "synth.deviation_scale=0",
                      "synth.noise_scale=0", "synth.level=5")
    assert cli.main(["simulate"] + args) == 0
    rows = list(csv.reader(open(tmp_path / "series.csv")))[1:]
    assert {float(r[1]) for r in rows} == {5.0}


def test_run_outputs_and_aggregates(tmp_path, capsys):
    assert cli.main(["run"] + small_args(tmp_path)) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["n_windows"] == 2 and report["n_failed"] == 0
    assert parse_text(report["config"]).values == load_config(None, SMALL + [f"run.out={tmp_path}"]).values
    rows = list(csv.DictReader(io.StringIO((tmp_path / "predictions.csv").read_text())))
    assert len(rows) == 4
    points = [(int(r["window"]), int(r["step"]), 0, "", float(r["truth"]), float(r["prediction"])) for r in rows]
    again = aggregate(points, 2)
    assert abs(again["rmse"] - report["rmse"]) <= 1e-12
    assert abs(again["mape"] - report["mape"]) <= 1e-12
    np.testing.assert_allclose(again["rmse_by_step"], report["rmse_by_step"], rtol=0, atol=1e-12)
    assert len(rows[0]["beta"].split(";")) == 2
    for w in report["windows"]:
        assert w["scalars_exchanged"] == w["rounds"] * 13
    assert "windows: 2" in (tmp_path / "summary.txt").read_text()


def test_single_worker_run_matches_full_gp(tmp_path):
    # one expert: the fused forecast is the full GP trained on the window
    from scalegp.admm import train
    from scalegp.config import default_hyperparams
    from scalegp.data import rmse
    from scalegp.gp import LocalModel, Shard, estimate_noise, predict
    from scalegp.pipeline import load_series

    cfg = load_config(None, SMALL + ["admm.workers=1"])
    spec = cfg.kernel_spec()
    ds = load_series(cfg)
    preds, truths = [], []
    for start in (0, 30):
        y = ds.values[start:start + 60]
        offset = y.mean()
        fit_t, fit_y = ds.times[start:start + 59], y[:59] - offset
        noise = estimate_noise(fit_y)
        res = train(fit_t, fit_y, cfg.admm_config(), spec, init=default_hyperparams(cfg, fit_y, noise), noise=noise)
        full = Shard(ds.times[start:start + 60], y - offset)
        test_t = ds.times[start + 60:start + 62]
        preds.append(predict(LocalModel(full, res.hp, spec), test_t).mean + offset)
        truths.append(ds.values[start + 60:start + 62])
    expected = rmse(np.concatenate(preds), np.concatenate(truths))
    for strategy in ("qp", "softmax", "mirror"):
        out = tmp_path / strategy
        assert cli.main(["run"] + small_args(out, "admm.workers=1", f"fusion.strategy={strategy}")) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["rmse"] == pytest.approx(expected, rel=1e-9)


def test_exit_codes(tmp_path, capsys):
    assert cli.main(["run", "--set", "admm.bogus=1", "--out", str(tmp_path)]) == 2
    assert cli.main(["run", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert cli.main(["run", "--threads", "0", "--out", str(tmp_path)]) == 2
    missing = small_args(tmp_path, "data.source=csv", f"data.path={tmp_path / 'none.csv'}")
    assert cli.main(["run"] + missing) == 2
    with pytest.raises(SystemExit):
        cli.main(["frobnicate"])


def test_all_windows_failed(tmp_path, monkeypatch, capsys):
    import scalegp.pipeline as pipeline

    def boom(*args, **kw):
        raise RuntimeError("injected")

    monkeypatch.setattr(pipeline, "fit_window", boom)
    assert cli.main(["run"] + small_args(tmp_path)) == 3
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["n_failed"] == 2 and report["windows"][0]["error"] == "RuntimeError: injected"


def test_validate(capsys):
    assert cli.main(["validate"]) == 0
    assert "FAIL" not in capsys.readouterr().out
    assert cli.main(["validate", "--tolerance-scale", "1e-30"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_bench_small(tmp_path, capsys):
    args = small_args(tmp_path, "bench.workers=1,2")
    assert cli.main(["bench"] + args) == 0
    res = json.loads((tmp_path / "bench.json").read_text())
    assert [(r["workers"], r["toeplitz"]) for r in res["runs"]] == [(1, True), (2, True), (1, False)]
    assert "toeplitz_faster_at_k1" in res


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "scalegp.cli", "simulate"] + small_args(tmp_path),
                          capture_output=True, text=True)
    assert proc.returncode == 0 and (tmp_path / "series.csv").exists()
