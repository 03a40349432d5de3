"""Exact GP regression on one data shard.

The training objective is ``l(theta) = y^T C^{-1} y + log|C|`` with
``C = K(theta) + sigma2_e I`` (no ``n log 2 pi`` constant and no factor
1/2). Regular grids go through the Toeplitz path, everything else through
a dense Cholesky factorization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .kernel import (
    NOISE_INDEX,
    HyperParams,
    KernelSpec,
    covariance_matrix,
    eval_composite,
    eval_composite_grad,
    kernel_matrix,
    kernel_matrix_grad,
)
from .linalg import (
    Breakdown,
    NotPositiveDefinite,
    ToeplitzOperator,
    spd_factor,
    toeplitz_quadratic_form,
)

__all__ = [
    "JITTER_REL",
    "Shard",
    "LocalModel",
    "PosteriorPrediction",
    "FitResult",
    "nll",
    "nll_grad",
    "nll_and_grad",
    "fit_local",
    "predict",
    "estimate_noise",
    "default_init",
]

log = logging.getLogger(__name__)

JITTER_REL = 1e-8
# log-domain box for the optimizer; keeps C finite and factorizable
LOG_BOUNDS = (-20.0, 20.0)


def _is_regular(times: np.ndarray) -> bool:
    if times.size < 3:
        return True
    steps = np.diff(times)
    return bool(np.all(steps == steps[0]))


@dataclass(frozen=True)
class Shard:
    """Training inputs (sample indices) and targets held by one worker."""

    times: np.ndarray
    values: np.ndarray
    regular_grid: bool = None

    def __post_init__(self):
        t = np.array(self.times, dtype=float).ravel()
        y = np.array(self.values, dtype=float).ravel()
        if t.size != y.size:
            raise ValueError(f"times ({t.size}) and values ({y.size}) differ in length")
        if t.size < 1:
            raise ValueError("a shard needs at least one point")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("shard times must be strictly increasing")
        if not np.all(np.isfinite(y)):
            raise ValueError("shard values must be finite")
        t.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", y)
        regular = _is_regular(t)
        if self.regular_grid is None:
            object.__setattr__(self, "regular_grid", regular)
        elif self.regular_grid and not regular:
            raise ValueError("regular_grid=True but times are not equally spaced")

    def __len__(self):
        return self.times.size


@dataclass(frozen=True)
class PosteriorPrediction:
    mean: np.ndarray
    variance: np.ndarray


def _jitter(hp: HyperParams, spec: KernelSpec) -> float:
    # 1e-8 x mean of diag(C); diag(C) is constant for a stationary kernel
    return JITTER_REL * (float(eval_composite(0.0, hp, spec)) + hp.sigma2_e)


def _solver(shard: Shard, hp: HyperParams, spec: KernelSpec, use_toeplitz: bool = True, jitter_scale: float = 1.0):
    """Factorize ``C + jitter I`` over the shard.

    Returns an object with ``solve``/``logdet``; a Toeplitz operator when
    the grid is regular (and requested), else a dense Cholesky factor.
    """
    jitter = _jitter(hp, spec) * jitter_scale
    if use_toeplitz and shard.regular_grid:
        column = eval_composite(shard.times - shard.times[0], hp, spec)
        column[0] += hp.sigma2_e + jitter
        op = ToeplitzOperator(column)
        try:
            op.logdet()  # forces the recursion so breakdown surfaces here
            return op
        except Breakdown as exc:
            log.debug("Toeplitz breakdown (%s); falling back to dense Cholesky", exc)
    return spd_factor(covariance_matrix(shard.times, hp, spec), jitter=jitter)


def _factorize(shard, hp, spec, use_toeplitz=True):
    """Factorize with the default jitter, escalating it tenfold once on failure.

    Returns ``(factor, jitter_scale)``.
    """
    try:
        return _solver(shard, hp, spec, use_toeplitz), 1.0
    except NotPositiveDefinite:
        log.debug("factorization failed; retrying with 10x jitter")
        return _solver(shard, hp, spec, use_toeplitz, jitter_scale=10.0), 10.0


def nll(shard: Shard, hp: HyperParams, spec: KernelSpec, use_toeplitz: bool = True) -> float:
    """``y^T C^{-1} y + log|C|`` over the shard."""
    f, _ = _factorize(shard, hp, spec, use_toeplitz)
    y = shard.values
    return float(y @ f.solve(y) + f.logdet())


def nll_and_grad(shard: Shard, hp: HyperParams, spec: KernelSpec, use_toeplitz: bool = True):
    """Objective value and its gradient w.r.t. all seven log-hyperparameters.

    Gradient component ``i`` is ``Tr((C^{-1} - g g^T) dC/dlog(theta_i))``
    with ``g = C^{-1} y``; inactive terms give zeros. The diagonal jitter
    scales with the variances, so its derivative is included.
    """
    f, jitter_scale = _factorize(shard, hp, spec, use_toeplitz)
    y = shard.values
    gamma = f.solve(y)
    value = float(y @ gamma + f.logdet())
    grad = np.zeros(NOISE_INDEX + 1)
    free = set(spec.free_indices)

    if isinstance(f, ToeplitzOperator):
        lags = shard.times - shard.times[0]
        for i in free:
            d = eval_composite_grad(lags, hp, spec, i, log_domain=True)
            grad[i] = f.trace_inverse_times(d) - toeplitz_quadratic_form(d, gamma)
        trace_w = f.inverse_diagonal_sums[0] - gamma @ gamma
    else:
        W = f.inverse()
        W -= np.outer(gamma, gamma)
        for i in free:
            grad[i] = np.sum(W * kernel_matrix_grad(shard.times, hp, spec, i, log_domain=True))
        trace_w = np.trace(W)
    grad[NOISE_INDEX] = hp.sigma2_e * trace_w

    raw = hp.as_array()
    jitter_weight = JITTER_REL * jitter_scale * trace_w
    for i in _variance_indices(spec):
        grad[i] += jitter_weight * raw[i]
    return value, grad


def _variance_indices(spec: KernelSpec):
    idx = [i for i in spec.free_indices if i < 3]
    return idx + [NOISE_INDEX]


def nll_grad(shard: Shard, hp: HyperParams, spec: KernelSpec, use_toeplitz: bool = True) -> np.ndarray:
    return nll_and_grad(shard, hp, spec, use_toeplitz)[1]


@dataclass
class FitResult:
    """Outcome of a local hyperparameter fit.

    ``hp`` is always the best iterate seen; ``converged`` is False when the
    optimizer stopped on the iteration cap or a line-search failure.
    """

    hp: HyperParams
    objective: float
    initial_objective: float
    grad_norm: float
    iterations: int
    evaluations: int
    converged: bool
    message: str
    objective_trace: list = field(default_factory=list)


def fit_local(
    shard: Shard,
    init: HyperParams,
    spec: KernelSpec,
    proximal=None,
    max_iter: int = 200,
    gtol: float = 1e-5,
    use_toeplitz: bool = True,
) -> FitResult:
    """Minimize the shard objective over the log of the active kernel hyperparameters.

    With ``proximal=(z, zeta, rho)`` the objective becomes
    ``l(u) + zeta^T (u - z) + rho/2 ||u - z||^2`` where ``u``, ``z`` and
    ``zeta`` are log-domain vectors ordered like ``spec.free_indices``.
    The noise variance stays at ``init.sigma2_e``.
    """
    idx = list(spec.free_indices)
    if proximal is not None:
        z, zeta, rho = proximal
        z = np.asarray(z, dtype=float)
        zeta = np.asarray(zeta, dtype=float)
        rho = float(rho)
        if z.shape != (len(idx),) or zeta.shape != (len(idx),):
            raise ValueError("proximal z/zeta must match the number of free hyperparameters")

    best = {"f": np.inf, "u": None, "g": None}
    n_eval = 0

    def objective(u):
        nonlocal n_eval
        n_eval += 1
        hp = init.with_free(u, spec)
        try:
            value, g_all = nll_and_grad(shard, hp, spec, use_toeplitz)
        except (NotPositiveDefinite, FloatingPointError, ValueError):
            return 1e300, np.zeros_like(u)
        g = g_all[idx]
        if proximal is not None:
            diff = u - z
            value += zeta @ diff + 0.5 * rho * diff @ diff
            g = g + zeta + rho * diff
        if not np.isfinite(value):
            return 1e300, np.zeros_like(u)
        if value < best["f"]:
            best.update(f=value, u=u.copy(), g=g.copy())
        return value, g

    u0 = init.free_log(spec)
    f0, _ = objective(u0)
    trace = [f0]

    def callback(intermediate_result):
        trace.append(float(intermediate_result.fun))

    res = scipy.optimize.minimize(
        objective,
        u0,
        jac=True,
        method="L-BFGS-B",
        bounds=[LOG_BOUNDS] * len(idx),
        callback=callback,
        options={"maxiter": max_iter, "gtol": gtol, "ftol": 1e-15, "maxcor": 10},
    )
    u_best = best["u"] if best["u"] is not None else u0
    grad_norm = float(np.linalg.norm(best["g"])) if best["g"] is not None else np.inf
    converged = bool(grad_norm <= gtol or (res.success and "PGTOL" in str(res.message).upper()))
    return FitResult(
        hp=init.with_free(u_best, spec),
        objective=float(best["f"]),
        initial_objective=float(f0),
        grad_norm=grad_norm,
        iterations=int(res.nit),
        evaluations=n_eval,
        converged=converged,
        message=str(res.message),
        objective_trace=trace,
    )


class LocalModel:
    """A shard with fixed hyperparameters and its cached factorization.

    ``alpha = C^{-1} y`` is computed once; the object is not mutated
    afterwards and can be shared between threads.
    """

    def __init__(self, shard: Shard, hp: HyperParams, spec: KernelSpec, use_toeplitz: bool = True):
        self.shard = shard
        self.hp = hp
        self.spec = spec
        self.factor, _ = _factorize(shard, hp, spec, use_toeplitz)
        self.alpha = self.factor.solve(shard.values)

    def predict(self, test_times) -> PosteriorPrediction:
        return predict(self, test_times)


def predict(model: LocalModel, test_times) -> PosteriorPrediction:
    """Posterior mean and latent-function variance at ``test_times``."""
    test_times = np.asarray(test_times, dtype=float).ravel()
    k_star = kernel_matrix(model.shard.times, test_times, model.hp, model.spec)
    mean = k_star.T @ model.alpha
    v = model.factor.solve(k_star)
    prior = eval_composite(0.0, model.hp, model.spec)
    variance = prior - np.einsum("ij,ij->j", k_star, v)
    # rounding can push near-interpolation variances to <= 0
    variance = np.maximum(variance, np.finfo(float).tiny)
    return PosteriorPrediction(mean=mean, variance=variance)


def estimate_noise(values) -> float:
    """Half the variance of the lag-1 differenced series, floored away from zero."""
    y = np.asarray(values, dtype=float)
    if y.size < 2:
        raise ValueError("need at least two values to estimate noise")
    est = 0.5 * float(np.var(np.diff(y)))
    floor = max(1e-8 * float(np.var(y)), 1e-12)
    return max(est, floor)


def default_init(values, noise: float, overrides: dict | None = None) -> HyperParams:
    """Raw value 1 for every length-scale, data variance for every kernel variance."""
    var = float(np.var(np.asarray(values, dtype=float)))
    var = var if var > 0 else 1.0
    params = dict(sigma2_p1=var, sigma2_p2=var, sigma2_lt=var, l2_p1=1.0, l2_p2=1.0, l2_lt=1.0, sigma2_e=noise)
    if overrides:
        params.update(overrides)
    return HyperParams(**params)
