"""Traffic series ingestion, synthetic generation, rolling windows and metrics."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

__all__ = [
    "DataError",
    "MalformedRow",
    "NonMonotoneTimestamps",
    "Gap",
    "ZeroTruth",
    "TimeSeriesDataset",
    "SyntheticSpec",
    "load_csv",
    "save_csv",
    "generate",
    "rolling_windows",
    "rmse",
    "mape",
]

log = logging.getLogger(__name__)

DEFAULT_START = datetime(2015, 9, 1)
MAPE_ZERO_TOL = 1e-9


class DataError(ValueError):
    pass


class MalformedRow(DataError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class NonMonotoneTimestamps(DataError):
    def __init__(self, line: int):
        super().__init__(f"line {line}: timestamp does not increase")
        self.line = line


class Gap(DataError):
    def __init__(self, position: int, missing: int):
        super().__init__(f"{missing} missing sample(s) before row {position}")
        self.position = position
        self.missing = missing


class ZeroTruth(DataError):
    pass


@dataclass(frozen=True)
class TimeSeriesDataset:
    """Equally spaced traffic values starting at ``start``."""

    values: np.ndarray
    start: datetime = DEFAULT_START
    interval_hours: int = 1

    def __post_init__(self):
        v = np.array(self.values, dtype=float).ravel()
        if v.size < 2:
            raise DataError("a dataset needs at least two values")
        if not np.all(np.isfinite(v)):
            raise DataError("dataset contains missing or non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    @property
    def times(self) -> np.ndarray:
        """Sample indices 0..N-1."""
        return np.arange(self.values.size, dtype=float)

    def timestamps(self) -> list:
        step = timedelta(hours=self.interval_hours)
        return [self.start + i * step for i in range(self.values.size)]


def _parse_timestamp(text: str, line: int) -> datetime:
    try:
        ts = datetime.fromisoformat(text.strip())
    except ValueError:
        raise MalformedRow(line, f"bad timestamp {text!r}") from None
    if ts.minute or ts.second or ts.microsecond:
        raise MalformedRow(line, f"timestamp {text!r} is not hour-aligned")
    return ts


def load_csv(path, impute: str = "none") -> TimeSeriesDataset:
    """Read a ``timestamp,value`` CSV with a header row.

    Missing hours raise :class:`Gap` unless ``impute="linear"``, in which
    case they are filled by linear interpolation between the neighbours.
    """
    if impute not in ("none", "linear"):
        raise ValueError(f"impute must be 'none' or 'linear', got {impute!r}")
    stamps, values = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise MalformedRow(1, "empty file")
        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 2:
                raise MalformedRow(line, f"expected 2 columns, got {len(row)}")
            ts = _parse_timestamp(row[0], line)
            try:
                value = float(row[1])
            except ValueError:
                raise MalformedRow(line, f"bad value {row[1]!r}") from None
            if not np.isfinite(value):
                raise MalformedRow(line, f"non-finite value {row[1]!r}")
            if stamps and ts <= stamps[-1]:
                raise NonMonotoneTimestamps(line)
            stamps.append(ts)
            values.append(value)

    if len(values) < 2:
        raise DataError(f"{path}: need at least two rows")

    hours = np.array([(ts - stamps[0]) / timedelta(hours=1) for ts in stamps])
    steps = np.diff(hours).astype(int)
    if np.any(steps > 1):
        if impute == "none":
            pos = int(np.argmax(steps > 1)) + 1
            raise Gap(pos, int(steps[pos - 1]) - 1)
        full = np.arange(int(hours[-1]) + 1, dtype=float)
        filled = np.interp(full, hours, values)
        log.info("imputed %d missing hour(s) in %s", full.size - len(values), path)
        return TimeSeriesDataset(filled, start=stamps[0])
    return TimeSeriesDataset(np.array(values), start=stamps[0])


def save_csv(dataset: TimeSeriesDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", "value"])
        for ts, v in zip(dataset.timestamps(), dataset.values):
            writer.writerow([ts.isoformat(), repr(float(v))])


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic weekly + daily + deviation + noise series.

    ``level`` is a constant offset so that percentage errors stay meaningful.
    """

    weekly_amp: float = 1.0
    daily_amp: float = 1.0
    deviation_scale: float = 0.1
    noise_scale: float = 0.1
    length: int = 720
    seed: int = 0
    level: float = 0.0
    smoothing: int = 6

    def __post_init__(self):
        if self.length < 2:
            raise ValueError("length must be >= 2")
        if self.weekly_amp != 0 and self.length <= 2 * 168:
            raise ValueError("a weekly term needs length > 336")
        if min(self.deviation_scale, self.noise_scale) < 0:
            raise ValueError("scales must be non-negative")
        if self.smoothing < 1:
            raise ValueError("smoothing window must be >= 1")


def _periodic_sin(t: np.ndarray, period: int) -> np.ndarray:
    # reduce the phase first so value(t + period) == value(t) bit for bit
    return np.sin(2.0 * np.pi * np.mod(t, period) / period)


def generate(spec: SyntheticSpec) -> TimeSeriesDataset:
    """Deterministic synthetic traffic trace.

    ``value(t) = level + A_w sin(2 pi t / 168) + A_d sin(2 pi t / 24) + dev(t) + noise(t)``
    with ``dev`` a Gaussian random walk smoothed by a trailing moving
    average and ``noise`` white Gaussian.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.length
    t = np.arange(n)
    increments = rng.standard_normal(n) * spec.deviation_scale
    noise = rng.standard_normal(n) * spec.noise_scale
    walk = np.cumsum(increments)
    w = spec.smoothing
    csum = np.concatenate(([0.0], np.cumsum(walk)))
    lo = np.maximum(t + 1 - w, 0)
    deviation = (csum[t + 1] - csum[lo]) / (t + 1 - lo)
    values = spec.level + spec.weekly_amp * _periodic_sin(t, 168) + spec.daily_amp * _periodic_sin(t, 24)
    values = values + deviation + noise
    return TimeSeriesDataset(values)


def rolling_windows(n_points: int, train_len: int, horizon: int, step: int = 1, repeats: int | None = None):
    """Yield ``(train_slice, test_slice)`` pairs over a series of ``n_points``.

    Window ``w`` trains on ``[w*step, w*step + train_len)`` and tests on the
    next ``horizon`` points; iteration stops once the test slice would run
    past the series (or after ``repeats`` windows).
    """
    if train_len < 1 or horizon < 1 or step < 1:
        raise ValueError("train_len, horizon and step must be positive")
    w = 0
    while repeats is None or w < repeats:
        start = w * step
        stop = start + train_len
        if stop + horizon > n_points:
            return
        yield slice(start, stop), slice(stop, stop + horizon)
        w += 1


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.size != truth.size or pred.size == 0:
        raise ValueError(f"need equal nonzero lengths, got {pred.size} and {truth.size}")
    return pred, truth


def rmse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def mape(pred, truth, return_excluded: bool = False):
    """Mean absolute percentage error (in percent).

    Points whose truth is within ``1e-9`` of zero are dropped from the mean;
    ``return_excluded`` also returns how many were dropped.
    """
    pred, truth = _pair(pred, truth)
    keep = np.abs(truth) >= MAPE_ZERO_TOL
    excluded = int(truth.size - keep.sum())
    if not keep.any():
        raise ZeroTruth("every truth value is zero; MAPE undefined")
    if excluded:
        log.warning("mape: excluded %d near-zero truth value(s)", excluded)
    value = float(np.mean(np.abs((pred[keep] - truth[keep]) / truth[keep])) * 100.0)
    return (value, excluded) if return_excluded else value
