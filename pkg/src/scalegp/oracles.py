"""Self-check suite run by ``scalegp validate``.

Each check compares a fast/analytic code path against an independent,
slower reference (finite differences, dense algebra, brute-force grid
search, recomputation) and reports the worst error next to its
tolerance. ``tolerance_scale`` multiplies every tolerance so a failure
can be injected on purpose.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .admm import AdmmConfig, init_state, partition, run_round, tolerances
from .fusion import LocalPredictionSet, fuse, mirror_descent, qp_objective, solve_qp_single
from .gp import Shard, nll, nll_and_grad
from .kernel import HyperParams, KernelSpec, kernel_matrix, kernel_matrix_grad
from .linalg import ToeplitzOperator

__all__ = ["CheckResult", "run_suite", "format_table"]


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tolerance)


def random_hyperparams(rng) -> HyperParams:
    return HyperParams(
        sigma2_p1=np.exp(rng.uniform(-1, 1)),
        sigma2_p2=np.exp(rng.uniform(-1, 1)),
        sigma2_lt=np.exp(rng.uniform(-1, 1)),
        l2_p1=np.exp(rng.uniform(-1, 1)),
        l2_p2=np.exp(rng.uniform(-1, 1)),
        l2_lt=np.exp(rng.uniform(1, 4)),
        sigma2_e=np.exp(rng.uniform(-2, 0)),
    )


def _fd_gradient(rng, draws=20, step=1e-5):
    spec = KernelSpec()
    worst = 0.0
    for _ in range(draws):
        n = int(rng.integers(3, 41))
        t = np.arange(n, dtype=float)
        hp = random_hyperparams(rng)
        y = rng.standard_normal(n)
        shard = Shard(t, y)
        _, g = nll_and_grad(shard, hp, spec)
        base = hp.to_log()
        for i in range(7):
            up, dn = base.copy(), base.copy()
            up[i] += step
            dn[i] -= step
            fd = (nll(shard, HyperParams.from_log(up), spec) - nll(shard, HyperParams.from_log(dn), spec)) / (2 * step)
            worst = max(worst, abs(g[i] - fd) / max(abs(fd), 1.0))
    return worst


def _kernel_grad(rng, draws=10, step=1e-6):
    spec = KernelSpec()
    worst = 0.0
    t = np.array([0.0, 1.0, 2.5, 7.0, 30.0, 100.0])
    for _ in range(draws):
        hp = random_hyperparams(rng)
        base = hp.to_log()
        for i in range(7):
            up, dn = base.copy(), base.copy()
            up[i] += step
            dn[i] -= step

            def cov(v):
                h = HyperParams.from_log(v)
                C = kernel_matrix(t, t, h, spec)
                return C + h.sigma2_e * np.eye(t.size)

            fd = (cov(up) - cov(dn)) / (2 * step)
            an = kernel_matrix_grad(t, hp, spec, i, log_domain=True)
            worst = max(worst, float(np.max(np.abs(an - fd)) / max(np.max(np.abs(fd)), 1.0)))
    return worst


def _toeplitz(rng):
    spec = KernelSpec()
    worst = 0.0
    for n in (8, 64, 256):
        hp = random_hyperparams(rng)
        col = kernel_matrix(np.arange(n, dtype=float), [0.0], hp, spec)[:, 0]
        col[0] += hp.sigma2_e
        op = ToeplitzOperator(col)
        dense = scipy.linalg.toeplitz(col)
        b = rng.standard_normal(n)
        x_ref = scipy.linalg.solve(dense, b, assume_a="pos")
        ld_ref = np.linalg.slogdet(dense)[1]
        worst = max(worst, np.max(np.abs(op.solve(b) - x_ref)) / max(np.max(np.abs(x_ref)), 1.0))
        worst = max(worst, abs(op.logdet() - ld_ref) / max(abs(ld_ref), 1.0))
    return float(worst)


def simplex_grid(k: int, step: float):
    """Every point of the simplex whose coordinates are multiples of ``step``."""
    m = int(round(1 / step))
    for head in itertools.product(range(m + 1), repeat=k - 1):
        s = sum(head)
        if s <= m:
            yield np.array(head + (m - s,), dtype=float) / m


def _qp_grid(rng, draws=10):
    worst = 0.0
    for _ in range(draws):
        k = int(rng.integers(2, 4))
        mu = rng.normal(0, 1, k)
        var = np.exp(rng.uniform(-1, 1, k))
        y = float(rng.normal(0, 1.2))
        loc = LocalPredictionSet(mu[:, None], var[:, None])
        beta, r = solve_qp_single(loc, y, return_r=True)
        f = qp_objective(r, mu / var, y)
        grid = min(float((y - fuse(loc, g).mean[0]) ** 2) for g in simplex_grid(k, 0.01))
        worst = max(worst, f - grid)
    return max(worst, 0.0)


def _fusion_algebra(rng):
    k, p = 4, 5
    loc = LocalPredictionSet(rng.normal(size=(k, p)), np.exp(rng.normal(size=(k, p))))
    beta = rng.dirichlet(np.ones(k))
    out = fuse(loc, beta)
    prec = sum(beta[i] / loc.variances[i] for i in range(k))
    mean = sum(beta[i] * loc.means[i] / loc.variances[i] for i in range(k)) / prec
    err = max(np.max(np.abs(out.variance - 1 / prec)), np.max(np.abs(out.mean - mean)))
    one_hot = fuse(loc, np.eye(k)[2])
    err = max(err, np.max(np.abs(one_hot.mean - loc.means[2])), np.max(np.abs(one_hot.variance - loc.variances[2])))
    return float(err)


def _mirror_bound(rng, draws=3):
    worst = -np.inf
    for k in (2, 8):
        for _ in range(draws):
            mu = rng.normal(size=(k, 1))
            var = np.exp(rng.uniform(-1, 1, (k, 1)))
            y = float(rng.normal())
            loc = LocalPredictionSet(mu, var)
            opt = solve_qp_single(loc, y)
            f_opt = float((y - fuse(loc, opt).mean[0]) ** 2)
            res = mirror_descent(loc, [y], iterations=500)
            bound = res.radius * res.grad_bound * np.sqrt(2.0 / 500)
            worst = max(worst, (res.objective - f_opt) - bound)
    return max(float(worst), 0.0)


def _coordinator(rng):
    spec = KernelSpec()
    t = np.arange(48, dtype=float)
    y = np.sin(2 * np.pi * t / 24) + 0.1 * rng.standard_normal(48)
    cfg = AdmmConfig(workers=3, rho=1.0, max_iter=20)
    shards = partition(t, y, cfg)
    base = HyperParams(1.0, 1.0, 1.0, 1.0, 1.0, 50.0, 0.05)
    state = init_state(shards, base, spec, cfg)
    err = 0.0
    for _ in range(2):
        new = run_round(state, shards, spec, cfg)
        z = np.mean(new.theta + state.zeta / cfg.rho, axis=0)
        zeta = state.zeta + cfg.rho * (new.theta - z)
        rec = new.history[-1]
        eps = tolerances(new.theta, z, zeta, cfg.rho, cfg.eps_abs, cfg.eps_rel)
        err = max(err, np.max(np.abs(z - new.z)), np.max(np.abs(zeta - new.zeta)),
                  abs(rec.dual - np.linalg.norm(cfg.rho * (z - state.z))), abs(eps[0] - rec.eps_pri))
        state = new
    return float(err)


CHECKS = (
    ("nll gradient vs finite differences", _fd_gradient, 1e-4),
    ("kernel gradient vs finite differences", _kernel_grad, 1e-5),
    ("toeplitz vs dense solve/logdet", _toeplitz, 1e-6),
    ("qp vs simplex grid search", _qp_grid, 1e-6),
    ("fusion algebra", _fusion_algebra, 1e-12),
    ("mirror descent bound excess", _mirror_bound, 1e-12),
    ("admm coordinator recomputation", _coordinator, 1e-12),
)


def run_suite(seed: int = 0, tolerance_scale: float = 1.0) -> list:
    out = []
    for name, fn, tol in CHECKS:
        rng = np.random.default_rng(seed)
        t0 = time.perf_counter()
        err = fn(rng)
        out.append(CheckResult(name, float(err), tol * tolerance_scale, time.perf_counter() - t0))
    return out


def format_table(results) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'error':>10}  {'tolerance':>10}  {'time':>7}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.error:10.3e}  {r.tolerance:10.3e}  {r.seconds:6.2f}s  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
