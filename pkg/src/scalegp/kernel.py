"""Composite stationary covariance for hourly traffic series.

The kernel is a sum of up to three elementary terms::

    k(tau) = s_p1 * exp(-sin^2(pi tau / lambda1) / l_p1)      # weekly periodic
           + s_p2 * exp(-sin^2(pi tau / lambda2) / l_p2)      # daily periodic
           + s_lt * exp(-tau^2 / (2 l_lt))                    # smooth deviations

where every ``l_*`` is a *squared* length-scale. Hyperparameters live in
the raw (positive) domain; optimizers work on their logarithms.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

__all__ = [
    "HYPER_NAMES",
    "NOISE_INDEX",
    "TERMS",
    "HyperParams",
    "KernelSpec",
    "eval_k1",
    "eval_k2",
    "eval_k3",
    "eval_composite",
    "eval_composite_grad",
    "kernel_matrix",
    "covariance_matrix",
    "kernel_matrix_grad",
]

HYPER_NAMES = ("sigma2_p1", "sigma2_p2", "sigma2_lt", "l2_p1", "l2_p2", "l2_lt", "sigma2_e")
NOISE_INDEX = 6
TERMS = ("weekly", "daily", "se")

# canonical indices (variance, squared length-scale) owned by each term
_TERM_PARAMS = {"weekly": (0, 3), "daily": (1, 4), "se": (2, 5)}


@dataclass(frozen=True)
class HyperParams:
    """Kernel hyperparameters plus the (fixed) observation noise variance."""

    sigma2_p1: float = 1.0
    sigma2_p2: float = 1.0
    sigma2_lt: float = 1.0
    l2_p1: float = 1.0
    l2_p2: float = 1.0
    l2_lt: float = 1.0
    sigma2_e: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not np.isfinite(v) or v <= 0.0:
                raise ValueError(f"{f.name} must be finite and > 0, got {v!r}")
            object.__setattr__(self, f.name, v)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in HYPER_NAMES])

    @classmethod
    def from_array(cls, values) -> "HyperParams":
        values = np.asarray(values, dtype=float)
        if values.shape != (len(HYPER_NAMES),):
            raise ValueError(f"expected {len(HYPER_NAMES)} values, got shape {values.shape}")
        return cls(*values.tolist())

    def to_log(self) -> np.ndarray:
        return np.log(self.as_array())

    @classmethod
    def from_log(cls, log_values) -> "HyperParams":
        return cls.from_array(np.exp(np.asarray(log_values, dtype=float)))

    def with_free(self, log_free, spec: "KernelSpec") -> "HyperParams":
        """Return a copy whose free (active-term) parameters are replaced.

        ``log_free`` is ordered like ``spec.free_indices``.
        """
        # fixed parameters are copied, not round-tripped through log/exp
        values = self.as_array()
        values[list(spec.free_indices)] = np.exp(np.asarray(log_free, dtype=float))
        return HyperParams(*values)

    def free_log(self, spec: "KernelSpec") -> np.ndarray:
        return self.to_log()[list(spec.free_indices)]

    def replace(self, **changes) -> "HyperParams":
        values = {name: getattr(self, name) for name in HYPER_NAMES}
        values.update(changes)
        return HyperParams(**values)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in HYPER_NAMES}


@dataclass(frozen=True)
class KernelSpec:
    """Periods (in samples) and which elementary terms are summed."""

    lambda1: float = 168.0
    lambda2: float = 24.0
    active_terms: frozenset = field(default_factory=lambda: frozenset(TERMS))

    def __post_init__(self):
        terms = frozenset(self.active_terms)
        unknown = terms - set(TERMS)
        if unknown:
            raise ValueError(f"unknown kernel terms: {sorted(unknown)}")
        if not terms:
            raise ValueError("at least one kernel term must be active")
        if not (float(self.lambda1) > float(self.lambda2) > 0.0):
            raise ValueError("periods must satisfy lambda1 > lambda2 > 0")
        object.__setattr__(self, "active_terms", terms)
        object.__setattr__(self, "lambda1", float(self.lambda1))
        object.__setattr__(self, "lambda2", float(self.lambda2))

    @property
    def free_indices(self) -> tuple:
        """Canonical indices of the hyperparameters an optimizer may move."""
        idx = []
        for term in self.active_terms:
            idx.extend(_TERM_PARAMS[term])
        return tuple(sorted(idx))


def _periodic(tau, variance, l2, period):
    s = np.sin(np.pi * np.asarray(tau, dtype=float) / period)
    return variance * np.exp(-(s * s) / l2)


def eval_k1(tau, hp: HyperParams, spec: KernelSpec):
    """Weekly periodic term at lag ``tau`` (scalar or array)."""
    return _periodic(tau, hp.sigma2_p1, hp.l2_p1, spec.lambda1)


def eval_k2(tau, hp: HyperParams, spec: KernelSpec):
    """Daily periodic term at lag ``tau``."""
    return _periodic(tau, hp.sigma2_p2, hp.l2_p2, spec.lambda2)


def eval_k3(tau, hp: HyperParams):
    """Squared-exponential term at lag ``tau``."""
    tau = np.asarray(tau, dtype=float)
    return hp.sigma2_lt * np.exp(-(tau * tau) / (2.0 * hp.l2_lt))


def eval_composite(tau, hp: HyperParams, spec: KernelSpec):
    terms = spec.active_terms
    out = np.zeros_like(np.asarray(tau, dtype=float))
    if "weekly" in terms:
        out = out + eval_k1(tau, hp, spec)
    if "daily" in terms:
        out = out + eval_k2(tau, hp, spec)
    if "se" in terms:
        out = out + eval_k3(tau, hp)
    return out


def eval_composite_grad(tau, hp: HyperParams, spec: KernelSpec, which: int, log_domain: bool = False):
    """Partial derivative of the composite kernel w.r.t. hyperparameter ``which``.

    Covers the six kernel hyperparameters only; the noise term is not a
    function of the lag. With ``log_domain`` the raw derivative is
    multiplied by the parameter value.
    """
    if not 0 <= which < NOISE_INDEX:
        raise ValueError(f"kernel hyperparameter index must be in [0, 6), got {which}")
    tau = np.asarray(tau, dtype=float)
    term = {0: "weekly", 3: "weekly", 1: "daily", 4: "daily", 2: "se", 5: "se"}[which]
    if term not in spec.active_terms:
        return np.zeros_like(tau)

    if term == "se":
        base = np.exp(-(tau * tau) / (2.0 * hp.l2_lt))
        if which == 2:
            d = base
        else:
            d = hp.sigma2_lt * base * (tau * tau) / (2.0 * hp.l2_lt**2)
    else:
        period = spec.lambda1 if term == "weekly" else spec.lambda2
        variance, l2 = (hp.sigma2_p1, hp.l2_p1) if term == "weekly" else (hp.sigma2_p2, hp.l2_p2)
        s = np.sin(np.pi * tau / period)
        s2 = s * s
        base = np.exp(-s2 / l2)
        d = base if which in (0, 1) else variance * base * s2 / l2**2

    if log_domain:
        d = d * hp.as_array()[which]
    return d


def _lags(times_a, times_b):
    a = np.asarray(times_a, dtype=float).ravel()
    b = np.asarray(times_b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("time vectors must be nonempty")
    return a[:, None] - b[None, :]


def kernel_matrix(times_a, times_b, hp: HyperParams, spec: KernelSpec) -> np.ndarray:
    """Cross-covariance matrix ``K[i, j] = k(times_a[i] - times_b[j])`` (noise excluded)."""
    return eval_composite(_lags(times_a, times_b), hp, spec)


def covariance_matrix(times, hp: HyperParams, spec: KernelSpec) -> np.ndarray:
    """``C = K + sigma2_e I`` over a single set of inputs."""
    C = kernel_matrix(times, times, hp, spec)
    C[np.diag_indices_from(C)] += hp.sigma2_e
    return C


def kernel_matrix_grad(times, hp: HyperParams, spec: KernelSpec, which: int, log_domain: bool = False) -> np.ndarray:
    """Elementwise derivative of ``C = K + sigma2_e I`` w.r.t. one hyperparameter.

    Returns the raw-domain derivative ``dC/dtheta`` by default and
    ``theta * dC/dtheta`` (i.e. ``dC/dlog(theta)``) when ``log_domain`` is set.
    ``which`` indexes ``HYPER_NAMES``; index 6 is the noise variance.
    """
    if not 0 <= which <= NOISE_INDEX:
        raise ValueError(f"hyperparameter index must be in [0, 6], got {which}")
    if which == NOISE_INDEX:
        n = np.asarray(times).size
        scale = hp.sigma2_e if log_domain else 1.0
        return scale * np.eye(n)
    return eval_composite_grad(_lags(times, times), hp, spec, which, log_domain=log_domain)
