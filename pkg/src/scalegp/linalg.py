"""Dense SPD factorizations and an O(n^2) symmetric Toeplitz path.

The Toeplitz path runs the Durbin recursion once per operator (reflection
coefficients and prediction-error variances are cached), then reuses it
for Levinson solves, the log-determinant and the diagonal sums of the
inverse. The last item gives exact traces ``Tr(T^{-1} D)`` against any
symmetric Toeplitz ``D`` in O(n) extra work, which is what the marginal
likelihood gradient needs.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg

__all__ = [
    "NotPositiveDefinite",
    "Breakdown",
    "SpdFactorization",
    "ToeplitzOperator",
    "spd_factor",
    "spd_solve",
    "spd_logdet",
    "toeplitz_solve",
    "toeplitz_logdet",
    "BREAKDOWN_TOL",
]

# smallest prediction-error variance tolerated by the Durbin recursion
BREAKDOWN_TOL = 1e-12


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


class Breakdown(np.linalg.LinAlgError):
    """Levinson/Durbin recursion hit a (near) zero prediction-error variance."""


@dataclass(frozen=True)
class SpdFactorization:
    """Lower Cholesky factor ``L`` with ``L @ L.T == C``."""

    L: np.ndarray

    @property
    def n(self) -> int:
        return self.L.shape[0]

    def solve(self, b):
        return scipy.linalg.cho_solve((self.L, True), np.asarray(b, dtype=float), check_finite=False)

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.L))))

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.n))


def spd_factor(C, jitter: float = 0.0) -> SpdFactorization:
    """Cholesky-factor a symmetric matrix, optionally adding ``jitter`` to the diagonal."""
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {C.shape}")
    if jitter:
        C = C + jitter * np.eye(C.shape[0])
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if not np.all(np.isfinite(L)):
        raise NotPositiveDefinite("non-finite Cholesky factor")
    return SpdFactorization(L)


def spd_solve(f: SpdFactorization, b):
    return f.solve(b)


def spd_logdet(f: SpdFactorization) -> float:
    return f.logdet()


class ToeplitzOperator:
    """Symmetric Toeplitz matrix given by its first column.

    Construction is cheap; the Durbin recursion runs lazily on first use
    and is cached. Raises :class:`Breakdown` from any method that needs
    the recursion if a prediction-error variance drops below
    ``BREAKDOWN_TOL``.
    """

    def __init__(self, first_column):
        c = np.array(first_column, dtype=float).ravel()
        if c.size == 0:
            raise ValueError("first column must be nonempty")
        if not c[0] > 0.0:
            raise Breakdown(f"non-positive diagonal {c[0]!r}")
        c.setflags(write=False)
        self.column = c

    @property
    def n(self) -> int:
        return self.column.size

    def to_dense(self) -> np.ndarray:
        return scipy.linalg.toeplitz(self.column)

    def matvec(self, x):
        return scipy.linalg.matmul_toeplitz(self.column, np.asarray(x, dtype=float), check_finite=False)

    @cached_property
    def _durbin(self):
        # Yule-Walker recursion on the normalized column (c0 = 1).
        c = self.column
        n = c.size
        r = c[1:] / c[0]
        alphas = np.empty(max(n - 1, 0))
        betas = np.empty(n)
        betas[0] = 1.0
        y = np.empty(max(n - 1, 0))
        if n > 1:
            alpha = -r[0]
            beta = 1.0
            y[0] = alpha
            alphas[0] = alpha
            for k in range(1, n - 1):
                beta = (1.0 - alpha * alpha) * beta
                if beta * c[0] < BREAKDOWN_TOL:
                    raise Breakdown(f"prediction-error variance {beta * c[0]:.3e} at order {k}")
                betas[k] = beta
                alpha = -(r[k] + r[:k][::-1] @ y[:k]) / beta
                y[:k] = y[:k] + alpha * y[:k][::-1]
                y[k] = alpha
                alphas[k] = alpha
            betas[n - 1] = (1.0 - alpha * alpha) * beta
            if betas[n - 1] * c[0] < BREAKDOWN_TOL:
                raise Breakdown(f"prediction-error variance {betas[n - 1] * c[0]:.3e} at order {n - 1}")
        return alphas, betas, y

    @property
    def reflection_coefficients(self) -> np.ndarray:
        return self._durbin[0].copy()

    @property
    def prediction_error_variances(self) -> np.ndarray:
        return self.column[0] * self._durbin[1]

    def solve(self, b):
        """Levinson solve of ``T x = b`` for a vector or a matrix of columns."""
        alphas, betas, _ = self._durbin
        c = self.column
        n = c.size
        b = np.asarray(b, dtype=float)
        if b.shape[0] != n:
            raise ValueError(f"rhs has {b.shape[0]} rows, operator is {n}x{n}")
        squeeze = b.ndim == 1
        bb = (b.reshape(n, -1) / c[0]).astype(float)
        r = c[1:] / c[0]
        x = np.zeros_like(bb)
        x[0] = bb[0]
        if n > 1:
            y = np.empty(n - 1)
            y[0] = alphas[0]
            for k in range(1, n):
                mu = (bb[k] - r[:k][::-1] @ x[:k]) / betas[k]
                x[:k] += np.outer(y[:k][::-1], mu)
                x[k] = mu
                if k < n - 1:
                    a = alphas[k]
                    y[:k] = y[:k] + a * y[:k][::-1]
                    y[k] = a
        return x[:, 0] if squeeze else x

    def logdet(self) -> float:
        _, betas, _ = self._durbin
        return float(self.n * np.log(self.column[0]) + np.sum(np.log(betas)))

    @cached_property
    def inverse_first_column(self) -> np.ndarray:
        _, betas, y = self._durbin
        x = np.concatenate(([1.0], y)) / (self.column[0] * betas[-1])
        x.setflags(write=False)
        return x

    @cached_property
    def inverse_diagonal_sums(self) -> np.ndarray:
        """``s[k] = sum_i (T^{-1})[i, i+k]`` for ``k = 0..n-1``.

        Uses the persymmetric recurrence
        ``B[i+1, j+1] = B[i, j] + (x[i+1] x[j+1] - x[n-1-i] x[n-1-j]) / x[0]``
        with ``x`` the first column of ``B = T^{-1}``.
        """
        x = self.inverse_first_column
        n = x.size
        s = np.empty(n)
        xr = x[::-1]
        for k in range(n):
            m = n - 1 - k  # number of recurrence increments along diagonal k
            if m == 0:
                s[k] = x[k]
                continue
            l = np.arange(m)
            d = x[1 : m + 1] * x[1 + k : m + 1 + k] - xr[:m] * xr[k : m + k]
            s[k] = (n - k) * x[k] + np.dot(m - l, d) / x[0]
        s.setflags(write=False)
        return s

    def trace_inverse_times(self, other_column) -> float:
        """Exact ``Tr(T^{-1} D)`` for symmetric Toeplitz ``D`` with first column ``other_column``."""
        d = np.asarray(other_column, dtype=float)
        s = self.inverse_diagonal_sums
        return float(d[0] * s[0] + 2.0 * np.dot(d[1:], s[1:]))


def toeplitz_quadratic_form(column, v) -> float:
    """``v^T D v`` for symmetric Toeplitz ``D`` with the given first column."""
    v = np.asarray(v, dtype=float)
    n = v.size
    acf = np.correlate(v, v, mode="full")[n - 1 :]
    d = np.asarray(column, dtype=float)
    return float(d[0] * acf[0] + 2.0 * np.dot(d[1:], acf[1:]))


def toeplitz_solve(t: ToeplitzOperator, b):
    return t.solve(b)


def toeplitz_logdet(t: ToeplitzOperator) -> float:
    return t.logdet()
