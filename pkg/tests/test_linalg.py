import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from reference import k_scalar
from scalegp.linalg import (
    Breakdown,
    NotPositiveDefinite,
    ToeplitzOperator,
    spd_factor,
    spd_logdet,
    spd_solve,
    toeplitz_logdet,
    toeplitz_quadratic_form,
    toeplitz_solve,
)

P = dict(sigma2_p1=1.3, sigma2_p2=0.8, sigma2_lt=0.6, l2_p1=0.9, l2_p2=1.4, l2_lt=30.0, sigma2_e=0.2)


def random_spd(rng, n):
    A = rng.standard_normal((n, n))
    return A @ A.T + n * np.eye(n)


def kernel_column(n, p=P):
    col = np.array([k_scalar(float(i), p) for i in range(n)])
    col[0] += p["sigma2_e"]
    return col


def test_factor_examples():
    assert np.array_equal(spd_factor(np.eye(3)).L, np.eye(3))
    np.testing.assert_allclose(spd_factor([[4.0, 0.0], [0.0, 9.0]]).L, np.diag([2.0, 3.0]))
    C = random_spd(np.random.default_rng(0), 20)
    L = spd_factor(C).L
    assert np.max(np.abs(L @ L.T - C)) <= 1e-10


def test_factor_errors():
    with pytest.raises(NotPositiveDefinite):
        spd_factor([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ValueError):
        spd_factor(np.ones((2, 3)))
    # jitter rescues a singular matrix
    f = spd_factor(np.ones((2, 2)), jitter=1e-6)
    assert np.isfinite(f.logdet())


def test_solve_examples():
    b = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(spd_solve(spd_factor(np.eye(3)), b), b)
    np.testing.assert_allclose(spd_solve(spd_factor([[2.0]]), [4.0]), [2.0])
    rng = np.random.default_rng(1)
    C = random_spd(rng, 20)
    b = rng.standard_normal(20)
    x = spd_solve(spd_factor(C), b)
    assert np.max(np.abs(x - np.linalg.inv(C) @ b)) <= 1e-8
    assert np.linalg.norm(C @ x - b) <= 1e-8 * np.linalg.norm(b)
    B = rng.standard_normal((20, 3))
    np.testing.assert_allclose(spd_solve(spd_factor(C), B), np.linalg.solve(C, B), atol=1e-10)


def test_logdet_examples():
    assert spd_logdet(spd_factor(np.eye(4))) == 0.0
    assert spd_logdet(spd_factor(np.diag([np.e, np.e]))) == pytest.approx(2.0, abs=1e-15)
    C = random_spd(np.random.default_rng(2), 15)
    assert abs(spd_logdet(spd_factor(C)) - np.sum(np.log(np.linalg.eigvalsh(C)))) <= 1e-8


def test_toeplitz_examples():
    np.testing.assert_allclose(toeplitz_solve(ToeplitzOperator([1.0, 0.0, 0.0]), [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])
    np.testing.assert_allclose(toeplitz_solve(ToeplitzOperator([2.0, 0.0]), [4.0, 6.0]), [2.0, 3.0])
    assert toeplitz_logdet(ToeplitzOperator([1.0, 0.0, 0.0])) == 0.0
    assert toeplitz_logdet(ToeplitzOperator([4.0, 0.0])) == pytest.approx(2 * np.log(4.0), rel=1e-15)
    assert toeplitz_solve(ToeplitzOperator([5.0]), [10.0]) == pytest.approx([2.0])


@pytest.mark.parametrize("n", [8, 16, 32, 64, 128])
def test_toeplitz_matches_dense(n):
    col = kernel_column(n)
    op = ToeplitzOperator(col)
    dense = scipy.linalg.toeplitz(col)
    assert np.array_equal(op.to_dense(), dense)
    b = np.random.default_rng(n).standard_normal(n)
    f = spd_factor(dense)
    x_ref = spd_solve(f, b)
    assert np.max(np.abs(op.solve(b) - x_ref)) / np.max(np.abs(x_ref)) <= 1e-6
    assert abs(op.logdet() - spd_logdet(f)) <= 1e-6
    np.testing.assert_allclose(op.matvec(b), dense @ b, rtol=1e-12, atol=1e-12)


def test_toeplitz_inverse_quantities():
    n = 40
    col = kernel_column(n)
    dense = scipy.linalg.toeplitz(col)
    inv = np.linalg.inv(dense)
    op = ToeplitzOperator(col)
    np.testing.assert_allclose(op.inverse_first_column, inv[:, 0], rtol=1e-9, atol=1e-12)
    sums = op.inverse_diagonal_sums
    expected = np.array([np.trace(inv, offset=k) for k in range(n)])
    np.testing.assert_allclose(sums, expected, rtol=1e-8, atol=1e-10)
    other = kernel_column(n, dict(P, l2_lt=4.0))
    assert op.trace_inverse_times(other) == pytest.approx(np.trace(inv @ scipy.linalg.toeplitz(other)), rel=1e-9)
    v = np.random.default_rng(0).standard_normal(n)
    assert toeplitz_quadratic_form(other, v) == pytest.approx(v @ scipy.linalg.toeplitz(other) @ v, rel=1e-12)


def test_toeplitz_multiple_rhs():
    col = kernel_column(30)
    B = np.random.default_rng(4).standard_normal((30, 4))
    np.testing.assert_allclose(ToeplitzOperator(col).solve(B), np.linalg.solve(scipy.linalg.toeplitz(col), B), atol=1e-9)


def test_breakdown():
    with pytest.raises(Breakdown):
        ToeplitzOperator([0.0, 1.0])
    with pytest.raises(Breakdown):
        ToeplitzOperator([1.0, 1.0, 1.0]).logdet()
    with pytest.raises(ValueError):
        ToeplitzOperator([])


@settings(max_examples=30, deadline=None)
@given(
    st.integers(min_value=2, max_value=60),
    st.floats(min_value=0.05, max_value=5.0),
    st.floats(min_value=0.5, max_value=500.0),
)
def test_toeplitz_property(n, noise, l2):
    col = kernel_column(n, dict(P, sigma2_e=noise, l2_lt=l2))
    dense = scipy.linalg.toeplitz(col)
    op = ToeplitzOperator(col)
    b = np.linspace(-1, 1, n)
    x = op.solve(b)
    assert np.linalg.norm(dense @ x - b) <= 1e-7 * max(np.linalg.norm(b), 1.0) * np.linalg.cond(dense) ** 0.5
    assert op.logdet() == pytest.approx(np.linalg.slogdet(dense)[1], abs=1e-6)
