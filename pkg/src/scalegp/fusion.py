"""Generalized product-of-experts fusion of local GP predictions.

Experts are combined as ``1/s2 = sum_i beta_i / s2_i`` and
``mu = s2 * sum_i beta_i mu_i / s2_i`` with ``beta`` on the probability
simplex. Weights come from validation points close to the test block:

* ``qp``       exact minimizer for a single validation point,
* ``mirror``   entropic mirror descent for several validation points,
* ``softmax``  ``softmax(-rmse_k)`` of each expert's validation error,
* ``entropy``  per-point differential-entropy weights (comparison only).
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
import scipy.special

from .gp import LocalModel, Shard, predict
from .kernel import HyperParams, KernelSpec, eval_composite

__all__ = [
    "STRATEGIES",
    "MIN_VARIANCE",
    "DegenerateVariance",
    "LocalPredictionSet",
    "FusedPrediction",
    "MirrorDescentResult",
    "check_simplex",
    "fuse",
    "fusion_objective",
    "fusion_gradient",
    "qp_objective",
    "solve_qp_single",
    "mirror_step",
    "mirror_descent",
    "softmax_weights",
    "entropy_weights",
    "split_validation",
    "predict_fused",
]

log = logging.getLogger(__name__)

STRATEGIES = ("qp", "mirror", "softmax", "entropy")
MIN_VARIANCE = 1e-12


class DegenerateVariance(UserWarning):
    """An expert reported a variance below ``MIN_VARIANCE``; it was clamped."""


@dataclass(frozen=True)
class LocalPredictionSet:
    """Per-expert means and variances, shape ``(K, P)`` (experts x points)."""

    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        mu = np.atleast_2d(np.array(self.means, dtype=float))
        var = np.atleast_2d(np.array(self.variances, dtype=float))
        if mu.shape != var.shape:
            raise ValueError(f"means {mu.shape} and variances {var.shape} differ in shape")
        if np.any(~np.isfinite(var)) or np.any(~np.isfinite(mu)):
            raise ValueError("non-finite expert prediction")
        if np.any(var < MIN_VARIANCE):
            warnings.warn(f"clamping {int(np.sum(var < MIN_VARIANCE))} variance(s) to {MIN_VARIANCE}", DegenerateVariance, stacklevel=3)
            var = np.maximum(var, MIN_VARIANCE)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def experts(self) -> int:
        return self.means.shape[0]

    @property
    def points(self) -> int:
        return self.means.shape[1]

    @property
    def precision(self) -> np.ndarray:
        """``b_i(x) = 1 / s2_i(x)``."""
        return 1.0 / self.variances

    @property
    def weighted_means(self) -> np.ndarray:
        """``a_i(x) = mu_i(x) / s2_i(x)``."""
        return self.means / self.variances

    def subset(self, keep) -> "LocalPredictionSet":
        return LocalPredictionSet(self.means[keep], self.variances[keep])


@dataclass(frozen=True)
class FusedPrediction:
    mean: np.ndarray
    variance: np.ndarray
    beta: np.ndarray
    locals: LocalPredictionSet
    validation: LocalPredictionSet | None = None
    experts: tuple = ()
    dropped: tuple = ()
    info: dict = field(default_factory=dict)


def check_simplex(beta, atol: float = 1e-12) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if np.any(beta < 0) or not np.allclose(beta.sum(axis=0), 1.0, rtol=0, atol=atol):
        raise ValueError(f"weights are not on the simplex: {beta}")
    return beta


def fuse(locals_: LocalPredictionSet, beta) -> FusedPrediction:
    """Combine experts with weights ``beta``, shape ``(K,)`` or per point ``(K, P)``."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape[0] != locals_.experts:
        raise ValueError(f"{beta.shape[0]} weights for {locals_.experts} experts")
    check_simplex(beta, atol=1e-9)
    w = beta if beta.ndim == 2 else beta[:, None]
    precision = np.sum(w * locals_.precision, axis=0)
    variance = 1.0 / precision
    mean = variance * np.sum(w * locals_.weighted_means, axis=0)
    return FusedPrediction(mean=mean, variance=variance, beta=beta, locals=locals_)


def fusion_objective(beta, locals_: LocalPredictionSet, y) -> float:
    """Sum of squared validation residuals of the fused mean."""
    beta = np.asarray(beta, dtype=float)
    num = beta @ locals_.weighted_means
    den = beta @ locals_.precision
    return float(np.sum((np.asarray(y, dtype=float) - num / den) ** 2))


def fusion_gradient(beta, locals_: LocalPredictionSet, y) -> np.ndarray:
    """Analytic gradient of :func:`fusion_objective` w.r.t. ``beta``."""
    beta = np.asarray(beta, dtype=float)
    a, b = locals_.weighted_means, locals_.precision
    den = beta @ b
    fused = (beta @ a) / den
    resid = fused - np.asarray(y, dtype=float)
    return 2.0 * ((a - fused * b) / den) @ resid


def qp_objective(r, a, y) -> float:
    return float((y - np.dot(a, r)) ** 2)


def _max_entropy_root(w: np.ndarray) -> np.ndarray:
    """Max-entropy point of ``{beta in simplex : w . beta = 0}``; ``w`` has both signs."""
    scale = np.max(np.abs(w))
    u = w / scale

    def h(lam):
        return scipy.special.softmax(-lam * u) @ u

    lo, hi = -1.0, 1.0
    while h(lo) <= 0:
        lo *= 2.0
    while h(hi) >= 0:
        hi *= 2.0
    lam = scipy.optimize.brentq(h, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    return scipy.special.softmax(-lam * u)


def solve_qp_single(locals_: LocalPredictionSet, y_true: float, return_r: bool = False):
    """Optimal weights for one validation point.

    Minimizing ``(y - sum_i a_i r_i)^2`` over ``{r >= 0, sum_i b_i r_i = 1}``
    is equivalent to choosing the fused mean in ``[min mu_i, max mu_i]``
    (the vertices ``r = e_i / b_i`` map to ``mu_i``), so the optimum is
    ``y`` clipped into that interval. Among the optimal ``beta`` the one
    with maximum entropy is returned.
    """
    if locals_.points != 1:
        raise ValueError(f"the single-point QP needs exactly one validation point, got {locals_.points}")
    mu = locals_.means[:, 0]
    b = locals_.precision[:, 0]
    k = mu.size
    y = float(y_true)
    lo, hi = float(mu.min()), float(mu.max())
    if k == 1:
        beta = np.ones(1)
    elif y <= lo or y >= hi:
        target = lo if y <= lo else hi
        ties = mu == target
        beta = ties / ties.sum()
    else:
        w = b * (mu - y)
        beta = _max_entropy_root(w)
    beta = beta / beta.sum()
    if return_r:
        return beta, beta / (b @ beta)
    return beta


def mirror_step(beta, grad, eta) -> np.ndarray:
    """Exponentiated-gradient update followed by renormalization (KL projection)."""
    logits = np.log(np.asarray(beta, dtype=float)) - eta * np.asarray(grad, dtype=float)
    # log-domain normalization keeps large eta * g from overflowing
    logits -= np.max(logits)
    new = np.exp(logits)
    return new / new.sum()


@dataclass
class MirrorDescentResult:
    beta: np.ndarray
    objective: float
    eta: float
    grad_bound: float  # G used to set the step
    radius: float  # R = sqrt(log K)
    objectives: np.ndarray  # f(beta^r), r = 0..T
    grad_norms: np.ndarray  # ||g(beta^r)||_2, r = 0..T-1

    @property
    def best_so_far(self) -> np.ndarray:
        return np.minimum.accumulate(self.objectives)


def mirror_descent(
    locals_: LocalPredictionSet,
    y,
    iterations: int = 500,
    eta: float | None = None,
    beta0=None,
    pilot: int = 10,
) -> MirrorDescentResult:
    """Entropic mirror descent on the validation residual; returns the best iterate.

    Without an explicit ``eta`` the constant step ``(R / G) sqrt(2 / T)`` is
    used, with ``R = sqrt(log K)`` and ``G`` the largest gradient norm over
    the first ``pilot`` iterates of a provisional run.
    """
    y = np.asarray(y, dtype=float).ravel()
    k = locals_.experts
    if y.size != locals_.points or y.size < 1:
        raise ValueError("need one truth value per validation point")
    beta = np.full(k, 1.0 / k) if beta0 is None else check_simplex(np.array(beta0, dtype=float), atol=1e-9)
    radius = float(np.sqrt(np.log(k))) if k > 1 else 0.0
    if k == 1:
        f = fusion_objective(beta, locals_, y)
        return MirrorDescentResult(beta, f, 0.0, 0.0, 0.0, np.array([f]), np.zeros(0))

    T = int(iterations)
    G = None
    if eta is None:
        g0 = np.linalg.norm(fusion_gradient(beta, locals_, y))
        if g0 == 0.0:
            G, eta = 0.0, 0.0
        else:
            eta_pilot = radius / g0 * np.sqrt(2.0 / T)
            b = beta.copy()
            norms = []
            for _ in range(pilot):
                g = fusion_gradient(b, locals_, y)
                norms.append(np.linalg.norm(g))
                b = mirror_step(b, g, eta_pilot)
            G = float(max(norms))
            eta = radius / G * np.sqrt(2.0 / T)

    objectives = np.empty(T + 1)
    grad_norms = np.empty(T)
    best_beta, best_f = beta.copy(), np.inf
    for r in range(T + 1):
        f = fusion_objective(beta, locals_, y)
        objectives[r] = f
        if f < best_f:
            best_f, best_beta = f, beta.copy()
        if r == T:
            break
        g = fusion_gradient(beta, locals_, y)
        grad_norms[r] = np.linalg.norm(g)
        beta = mirror_step(beta, g, eta)
    if G is None:
        G = float(np.max(grad_norms)) if T else 0.0
    return MirrorDescentResult(best_beta, float(best_f), float(eta), G, radius, objectives, grad_norms)


def softmax_weights(errors) -> np.ndarray:
    """``beta_k = exp(-e_k) / sum_j exp(-e_j)`` (max-shifted)."""
    e = np.asarray(errors, dtype=float)
    return scipy.special.softmax(-e)


def entropy_weights(prior_variance, locals_: LocalPredictionSet) -> np.ndarray:
    """Per-point weights from the prior-to-posterior entropy drop.

    ``beta_i(x) ~ 0.5 (log s2_prior - log s2_i(x))``, clipped at zero and
    normalized over experts; points where no expert is informative get
    uniform weights.
    """
    prior = np.broadcast_to(np.asarray(prior_variance, dtype=float).reshape(-1, 1), locals_.variances.shape)
    gain = np.maximum(0.5 * (np.log(prior) - np.log(locals_.variances)), 0.0)
    total = gain.sum(axis=0)
    uniform = np.full_like(gain, 1.0 / locals_.experts)
    return np.where(total > 0, gain / np.where(total > 0, total, 1.0), uniform)


def split_validation(times, values, m: int):
    """Hold out the last ``m`` training points for weight optimization.

    Returns ``((train_times, train_values), (val_times, val_values))``.
    """
    times = np.asarray(times, dtype=float).ravel()
    values = np.asarray(values, dtype=float).ravel()
    if m < 0 or m >= times.size:
        raise ValueError(f"validation size must be in [0, {times.size}), got {m}")
    cut = times.size - m
    return (times[:cut], values[:cut]), (times[cut:], values[cut:])


def _expert_predictions(shards, hp, spec, points, use_toeplitz, executor):
    def one(shard):
        try:
            model = LocalModel(shard, hp, spec, use_toeplitz)
            return model, predict(model, points)
        except Exception as exc:  # an expert failure drops that expert only
            log.warning("expert on %d points failed: %s", len(shard), exc)
            return None, None

    if executor is None:
        return [one(s) for s in shards]
    return list(executor.map(one, shards))


def predict_fused(
    hp: HyperParams,
    shards,
    validation,
    test_times,
    spec: KernelSpec,
    strategy: str = "qp",
    concatenate: bool = False,
    use_toeplitz: bool = True,
    mirror_iterations: int = 500,
    threads: int = 1,
) -> FusedPrediction:
    """Fuse expert predictions at ``test_times`` with validation-optimized weights.

    ``validation`` is ``(times, values)`` of the held-out points (possibly
    empty). With ``concatenate`` each expert's test prediction is
    recomputed after appending the validation points to its shard; the
    weights stay those found on the validation set.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown fusion strategy {strategy!r}")
    val_t = np.asarray(validation[0], dtype=float).ravel()
    val_y = np.asarray(validation[1], dtype=float).ravel()
    test_times = np.asarray(test_times, dtype=float).ravel()
    m = val_t.size
    if strategy == "qp" and m > 1:
        raise ValueError(f"the qp strategy needs a single validation point, got {m}")

    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        points = np.concatenate([val_t, test_times])
        outcomes = _expert_predictions(shards, hp, spec, points, use_toeplitz, executor)
        alive = [i for i, (model, _) in enumerate(outcomes) if model is not None]
        dropped = tuple(i for i in range(len(shards)) if i not in alive)
        if not alive:
            raise RuntimeError("every expert failed")
        means = np.stack([outcomes[i][1].mean for i in alive])
        variances = np.stack([outcomes[i][1].variance for i in alive])
        val_set = LocalPredictionSet(means[:, :m], variances[:, :m]) if m else None
        test_set = LocalPredictionSet(means[:, m:], variances[:, m:])
        k = len(alive)
        info = {}

        if k == 1:
            beta = np.ones(1)
        elif strategy == "entropy":
            beta = None  # per test point, set below
        elif m == 0:
            log.warning("no validation points; using uniform weights")
            info["uniform_fallback"] = True
            beta = np.full(k, 1.0 / k)
        elif strategy == "qp":
            beta = solve_qp_single(val_set, val_y[0])
        elif strategy == "mirror":
            res = mirror_descent(val_set, val_y, iterations=mirror_iterations)
            beta = res.beta
            info.update(mirror_objective=res.objective, mirror_eta=res.eta, mirror_G=res.grad_bound)
        else:
            errors = np.sqrt(np.mean((val_set.means - val_y[None, :]) ** 2, axis=1))
            beta = softmax_weights(errors)
            info["validation_rmse"] = errors.tolist()

        if concatenate and m:
            merged = [
                Shard(np.concatenate([shards[i].times, val_t]), np.concatenate([shards[i].values, val_y]))
                for i in alive
            ]
            # validation points already absorbed; a failure here drops the expert again
            redo = _expert_predictions(merged, hp, spec, test_times, use_toeplitz, executor)
            keep = [j for j, (model, _) in enumerate(redo) if model is not None]
            if len(keep) < k:
                dropped = dropped + tuple(alive[j] for j in range(k) if j not in keep)
                alive = [alive[j] for j in keep]
                if beta is not None:
                    beta = beta[keep] / beta[keep].sum()
                k = len(alive)
                if not alive:
                    raise RuntimeError("every expert failed after concatenation")
            test_set = LocalPredictionSet(
                np.stack([redo[j][1].mean for j in keep]), np.stack([redo[j][1].variance for j in keep])
            )
    finally:
        if executor is not None:
            executor.shutdown()

    if beta is None:
        prior = float(eval_composite(0.0, hp, spec))
        beta = entropy_weights(prior, test_set)
    out = fuse(test_set, beta)
    return FusedPrediction(
        mean=out.mean,
        variance=out.variance,
        beta=beta,
        locals=test_set,
        validation=val_set,
        experts=tuple(alive),
        dropped=dropped,
        info=info,
    )
