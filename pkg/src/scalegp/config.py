"""Flat ``section.key = value`` run configuration.

Every key has a type and a default; unknown keys, unparsable values and
cross-field inconsistencies are rejected before any computation starts.
``to_text`` writes a file that parses back to an equal config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .admm import PARTITIONS, AdmmConfig
from .data import SyntheticSpec
from .fusion import STRATEGIES
from .gp import default_init
from .kernel import TERMS, HyperParams, KernelSpec

__all__ = ["ConfigError", "RunConfig", "SCHEMA", "parse_text", "load_config", "default_hyperparams"]


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple:
    items = tuple(int(x) for x in text.replace(" ", "").split(",") if x)
    if not items:
        raise ValueError("empty list")
    return items


def _terms(text: str) -> tuple:
    items = tuple(sorted({x.strip() for x in text.split(",") if x.strip()}, key=TERMS.index))
    bad = [x for x in items if x not in TERMS]
    if bad or not items:
        raise ValueError(f"kernel terms must be a non-empty subset of {TERMS}")
    return items


def _noise(text: str):
    if text.strip().lower() == "auto":
        return "auto"
    v = float(text)
    if not v > 0:
        raise ValueError("noise must be 'auto' or > 0")
    return v


def _choice(options):
    def parse(text):
        t = text.strip()
        if t not in options:
            raise ValueError(f"must be one of {options}")
        return t

    return parse


def _text(text):
    return text.strip()


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default)
SCHEMA = {
    "data.source": (_choice(("synth", "csv")), "synth"),
    "data.path": (_text, ""),
    "data.impute": (_choice(("none", "linear")), "none"),
    "synth.weekly_amp": (float, 10.0),
    "synth.daily_amp": (float, 20.0),
    "synth.deviation_scale": (float, 0.5),
    "synth.noise_scale": (float, 2.0),
    "synth.length": (int, 720),
    "synth.level": (float, 100.0),
    "synth.smoothing": (int, 6),
    "kernel.lambda1": (float, 168.0),
    "kernel.lambda2": (float, 24.0),
    "kernel.terms": (_terms, TERMS),
    "gp.noise": (_noise, "auto"),
    "gp.max_iter": (int, 200),
    "gp.gtol": (float, 1e-5),
    "gp.toeplitz": (_bool, True),
    "gp.init_l2_p1": (float, 1.0),
    "gp.init_l2_p2": (float, 1.0),
    "gp.init_l2_lt": (float, 1.0),
    "admm.workers": (int, 1),
    "admm.rho": (float, 1.0),
    "admm.eps_abs": (float, 1e-4),
    "admm.eps_rel": (float, 1e-3),
    "admm.max_rounds": (int, 50),
    "admm.partition": (_choice(PARTITIONS), "contiguous"),
    "fusion.strategy": (_choice(STRATEGIES), "qp"),
    "fusion.validation_points": (int, 1),
    "fusion.concatenate": (_bool, True),
    "fusion.mirror_iterations": (int, 500),
    "window.train_len": (int, 300),
    "window.horizon": (int, 10),
    "window.step": (int, 1),
    "window.repeats": (int, 0),
    "bench.workers": (_int_list, (1, 2, 4, 8)),
    "bench.compare_dense": (_bool, True),
    "run.seed": (int, 0),
    "run.threads": (int, 1),
    "run.out": (_text, "out"),
}


@dataclass(frozen=True)
class RunConfig:
    """Validated settings for one ``simulate``/``run``/``bench`` invocation."""

    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {key: default for key, (_, default) in SCHEMA.items()}
        unknown = sorted(set(self.values) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        merged.update(self.values)
        object.__setattr__(self, "values", merged)
        self._validate()

    def __getitem__(self, key):
        return self.values[key]

    def _validate(self):
        v = self.values
        positive_int = ["synth.length", "synth.smoothing", "gp.max_iter", "admm.workers", "admm.max_rounds",
                        "fusion.mirror_iterations", "window.train_len", "window.horizon", "window.step",
                        "run.threads"]
        for key in positive_int:
            if v[key] < 1:
                raise ConfigError(f"{key} must be >= 1, got {v[key]}")
        for key in ("gp.gtol", "admm.rho", "admm.eps_abs", "admm.eps_rel", "gp.init_l2_p1", "gp.init_l2_p2",
                    "gp.init_l2_lt"):
            if not (v[key] > 0 and math.isfinite(v[key])):
                raise ConfigError(f"{key} must be finite and > 0, got {v[key]}")
        if v["window.repeats"] < 0:
            raise ConfigError("window.repeats must be >= 0 (0 means every window)")
        if v["run.seed"] < 0 or v["run.seed"] >= 2**64:
            raise ConfigError("run.seed must be an unsigned 64-bit integer")
        if any(k < 1 for k in v["bench.workers"]):
            raise ConfigError("bench.workers entries must be >= 1")
        m = v["fusion.validation_points"]
        if m < 0:
            raise ConfigError("fusion.validation_points must be >= 0")
        if v["fusion.strategy"] == "qp" and m != 1:
            raise ConfigError("fusion.strategy = qp needs fusion.validation_points = 1")
        if m >= v["window.train_len"]:
            raise ConfigError("fusion.validation_points must be smaller than window.train_len")
        if v["data.source"] == "csv" and not v["data.path"]:
            raise ConfigError("data.source = csv needs data.path")
        try:
            self.kernel_spec()
            if v["data.source"] == "synth":
                self.synthetic_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        train_pts = v["window.train_len"] - m
        for k in set(v["bench.workers"]) | {v["admm.workers"]}:
            if train_pts < 2 * k:
                raise ConfigError(f"{train_pts} training points per window cannot feed {k} workers")

    # -- typed views --------------------------------------------------------

    def kernel_spec(self) -> KernelSpec:
        v = self.values
        return KernelSpec(v["kernel.lambda1"], v["kernel.lambda2"], frozenset(v["kernel.terms"]))

    def synthetic_spec(self) -> SyntheticSpec:
        v = self.values
        return SyntheticSpec(
            weekly_amp=v["synth.weekly_amp"],
            daily_amp=v["synth.daily_amp"],
            deviation_scale=v["synth.deviation_scale"],
            noise_scale=v["synth.noise_scale"],
            length=v["synth.length"],
            seed=v["run.seed"],
            level=v["synth.level"],
            smoothing=v["synth.smoothing"],
        )

    def admm_config(self, workers: int | None = None, use_toeplitz: bool | None = None) -> AdmmConfig:
        v = self.values
        return AdmmConfig(
            workers=v["admm.workers"] if workers is None else workers,
            rho=v["admm.rho"],
            eps_abs=v["admm.eps_abs"],
            eps_rel=v["admm.eps_rel"],
            max_rounds=v["admm.max_rounds"],
            partition=v["admm.partition"],
            seed=v["run.seed"],
            threads=v["run.threads"],
            max_iter=v["gp.max_iter"],
            gtol=v["gp.gtol"],
            use_toeplitz=v["gp.toeplitz"] if use_toeplitz is None else use_toeplitz,
        )

    def init_overrides(self) -> dict:
        v = self.values
        return {"l2_p1": v["gp.init_l2_p1"], "l2_p2": v["gp.init_l2_p2"], "l2_lt": v["gp.init_l2_lt"]}

    def with_overrides(self, **changes) -> "RunConfig":
        """Copy with dotted keys replaced, e.g. ``with_overrides(**{"admm.workers": 4})``."""
        values = dict(self.values)
        values.update(changes)
        return RunConfig(values)

    def to_text(self) -> str:
        return "".join(f"{key} = {_fmt(self.values[key])}\n" for key in SCHEMA)


def _parse_pair(key: str, raw: str, where: str):
    key = key.strip()
    if key not in SCHEMA:
        raise ConfigError(f"{where}: unknown config key {key!r}")
    parser, _ = SCHEMA[key]
    try:
        return key, parser(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from None


def parse_text(text: str, overrides=(), source: str = "<config>") -> RunConfig:
    """Parse config text, then apply ``key=value`` override strings in order."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, raw = body.split("=", 1)
        key, value = _parse_pair(key, raw, f"{source}:{lineno}")
        values[key] = value
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected section.key=value")
        key, raw = item.split("=", 1)
        key, value = _parse_pair(key, raw, f"override {item!r}")
        values[key] = value
    return RunConfig(values)


def load_config(path=None, overrides=()) -> RunConfig:
    text = ""
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_text(text, overrides, source=str(path) if path else "<defaults>")


def default_hyperparams(cfg: RunConfig, values, noise: float) -> HyperParams:
    """Initial hyperparameters for a training window under ``cfg``."""
    return default_init(values, noise, cfg.init_overrides())
