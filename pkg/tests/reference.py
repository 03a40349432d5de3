"""Slow, straightforward re-implementations used as test oracles.

Nothing here imports the package's numerical code: kernels are written
out from their closed forms with Python's ``math`` module, likelihoods use
a dense ``slogdet``/``solve``, and fusion weights come from brute-force
search over a simplex grid.
"""

import itertools
import math

import numpy as np

NAMES = ("sigma2_p1", "sigma2_p2", "sigma2_lt", "l2_p1", "l2_p2", "l2_lt", "sigma2_e")


def k_scalar(tau, p, lambda1=168.0, lambda2=24.0, terms=("weekly", "daily", "se")):
    """Composite kernel at one lag from a dict of raw hyperparameters."""
    out = 0.0
    if "weekly" in terms:
        out += p["sigma2_p1"] * math.exp(-math.sin(math.pi * tau / lambda1) ** 2 / p["l2_p1"])
    if "daily" in terms:
        out += p["sigma2_p2"] * math.exp(-math.sin(math.pi * tau / lambda2) ** 2 / p["l2_p2"])
    if "se" in terms:
        out += p["sigma2_lt"] * math.exp(-tau * tau / (2.0 * p["l2_lt"]))
    return out


def cov(times_a, times_b, p, **kw):
    return np.array([[k_scalar(a - b, p, **kw) for b in times_b] for a in times_a])


def nll_dense(times, y, p, **kw):
    """``y^T C^{-1} y + log|C|`` with the same relative jitter as the package."""
    C = cov(times, times, p, **kw)
    k0 = k_scalar(0.0, p, **kw)
    C = C + (p["sigma2_e"] + 1e-8 * (k0 + p["sigma2_e"])) * np.eye(len(times))
    sign, logdet = np.linalg.slogdet(C)
    assert sign > 0
    return float(y @ np.linalg.solve(C, y) + logdet)


def log_fd_grad(f, log_values, step=1e-5):
    """Central differences of ``f`` over a log-parameter vector."""
    g = np.zeros(len(log_values))
    for i in range(len(log_values)):
        up, dn = np.array(log_values, dtype=float), np.array(log_values, dtype=float)
        up[i] += step
        dn[i] -= step
        g[i] = (f(up) - f(dn)) / (2 * step)
    return g


def posterior_dense(train_t, train_y, test_t, p, **kw):
    C = cov(train_t, train_t, p, **kw) + p["sigma2_e"] * np.eye(len(train_t))
    ks = cov(train_t, test_t, p, **kw)
    mean = ks.T @ np.linalg.solve(C, train_y)
    var = np.array([k_scalar(0.0, p, **kw) for _ in test_t]) - np.einsum("ij,ij->j", ks, np.linalg.solve(C, ks))
    return mean, var


def fused(mu, var, beta):
    """Generalized product of experts at one point, straight from the definition."""
    prec = sum(b / v for b, v in zip(beta, var))
    return sum(b * m / v for b, m, v in zip(beta, mu, var)) / prec, 1.0 / prec


def simplex_grid(k, step):
    m = int(round(1 / step))
    for head in itertools.product(range(m + 1), repeat=k - 1):
        s = sum(head)
        if s <= m:
            yield np.array(head + (m - s,), dtype=float) / m


def qp_grid_best(mu, var, y, step):
    """Smallest squared residual of the fused mean over every simplex grid point.

    The fused mean is ``N / D`` with ``N``, ``D`` linear in ``beta``, so the
    sweep is vectorized over the last two free coordinates and looped over
    the rest.
    """
    mu, var = np.asarray(mu, float), np.asarray(var, float)
    a, b = mu / var, 1.0 / var
    k = mu.size
    m = int(round(1 / step))
    if k == 1:
        return float((y - mu[0]) ** 2)
    grid = np.arange(m + 1)
    if k == 2:
        w = grid / m
        return float(np.min((y - (w * a[0] + (1 - w) * a[1]) / (w * b[0] + (1 - w) * b[1])) ** 2))
    J, L = np.meshgrid(grid, grid, indexing="ij")
    keep = (J + L).ravel() <= m
    J, L = J.ravel()[keep], L.ravel()[keep]
    # ordered by J + L, the points with J + L <= r form a prefix of length (r+1)(r+2)/2
    order = np.argsort(J + L, kind="stable")
    J, L = J[order].astype(float), L[order].astype(float)
    best = np.inf
    for head in itertools.product(range(m + 1), repeat=k - 3):
        rest = m - sum(head)
        if rest < 0:
            continue
        n = (rest + 1) * (rest + 2) // 2
        j, l = J[:n], L[:n]
        last = rest - j - l
        num = sum(h * a[i] for i, h in enumerate(head)) + j * a[k - 3] + l * a[k - 2] + last * a[k - 1]
        den = sum(h * b[i] for i, h in enumerate(head)) + j * b[k - 3] + l * b[k - 2] + last * b[k - 1]
        best = min(best, float(np.min((y - num / den) ** 2)))
    return best
