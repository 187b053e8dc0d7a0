import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from paseig.linalg import (
    ConvergenceError,
    NonFiniteError,
    NotSPDError,
    OpCounter,
    cg_solve,
    cg_steps,
    energy_products,
    rayleigh_quotient,
    solve_gevp_dense,
    spmv,
)

SPD2 = sp.csr_matrix(np.array([[2.0, 1.0], [1.0, 3.0]]))


def random_spd(n, seed):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((n, n))
    return B @ B.T + n * np.eye(n)


def test_spmv_examples():
    x = np.array([1.5, -2.0, 3.0])
    np.testing.assert_array_equal(spmv(sp.identity(3, format="csr"), x), x)
    np.testing.assert_array_equal(spmv(SPD2, np.ones(2)), [3.0, 4.0])
    with pytest.raises(ValueError, match="mismatch"):
        spmv(SPD2, np.ones(3))


def test_spmv_counts():
    c = OpCounter()
    spmv(SPD2, np.ones(2), c, level=1)
    spmv(SPD2, np.ones(2), c, level=1)
    assert (c.matvecs, c.matvec_rows, c.per_level) == (2, 4, {1: 2})


def test_cg_steps_examples():
    rhs = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(cg_steps(sp.identity(3, format="csr"), rhs, np.zeros(3), 1), rhs)
    A = sp.diags([1.0, 2.0]).tocsr()
    np.testing.assert_allclose(cg_steps(A, np.array([1.0, 2.0]), np.zeros(2), 2), [1.0, 1.0])


def test_cg_steps_zero_count_returns_copy():
    x0 = np.array([1.0, 2.0])
    out = cg_steps(SPD2, np.ones(2), x0, 0)
    np.testing.assert_array_equal(out, x0)
    assert out is not x0


def test_cg_solve_examples():
    x, it = cg_solve(SPD2, np.zeros(2), np.zeros(2))
    assert it == 0 and np.all(x == 0)
    x, _ = cg_solve(SPD2, np.array([3.0, 4.0]), rel_tol=1e-12)
    np.testing.assert_allclose(x, [1.0, 1.0], rtol=1e-12)


def test_cg_solve_nonconvergence_and_nan():
    A = sp.csr_matrix(random_spd(30, 0))
    with pytest.raises(ConvergenceError) as info:
        cg_solve(A, np.ones(30), rel_tol=1e-14, max_iter=2)
    assert info.value.iterations == 2 and info.value.iterate is not None
    with pytest.raises(NonFiniteError):
        cg_solve(A, np.full(30, np.nan))


def test_cg_energy_error_monotone():
    n = 60
    A = sp.csr_matrix(random_spd(n, 4))
    rhs = np.random.default_rng(5).standard_normal(n)
    exact = np.linalg.solve(A.toarray(), rhs)
    errs = []
    for k in range(12):
        e = cg_steps(A, rhs, np.zeros(n), k) - exact
        errs.append(e @ (A @ e))
    assert all(b <= a * (1 + 1e-12) for a, b in zip(errs, errs[1:]))


def test_gevp_diagonal_example():
    res = solve_gevp_dense(np.diag([2.0, 6.0]), np.diag([1.0, 2.0]))
    np.testing.assert_allclose(res.eigenvalues, [2.0, 3.0])
    np.testing.assert_allclose(res.eigenvectors[:, 0], [1 / np.sqrt(2), 0.0], atol=1e-15)


def test_gevp_identical_matrices():
    M = random_spd(7, 1)
    np.testing.assert_allclose(solve_gevp_dense(M, M).eigenvalues, 1.0, rtol=1e-12)


def test_gevp_rejects_bad_input():
    with pytest.raises(NotSPDError, match="SPD"):
        solve_gevp_dense(np.eye(2), np.diag([1.0, -1.0]))
    with pytest.raises(ValueError):
        solve_gevp_dense(np.eye(2), np.eye(3))
    with pytest.raises(ValueError):
        solve_gevp_dense(np.eye(2), np.eye(2), count=3)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 12), seed=st.integers(0, 10_000), frac=st.floats(0.1, 1.0))
def test_gevp_against_scipy(n, seed, frac):
    A, M = random_spd(n, seed), random_spd(n, seed + 1)
    count = max(1, int(frac * n))
    res = solve_gevp_dense(A, M, count=count)
    ref = sla.eigh(A, M, eigvals_only=True)[:count]
    np.testing.assert_allclose(res.eigenvalues, ref, rtol=1e-10)
    X = res.eigenvectors
    assert np.all(np.diff(res.eigenvalues) >= 0)
    np.testing.assert_allclose(X.T @ A @ X, np.eye(count), atol=1e-9)
    np.testing.assert_allclose(A @ X, M @ X * res.eigenvalues, atol=1e-8 * np.abs(A).max())
    peak = X[np.argmax(np.abs(X), axis=0), np.arange(count)]
    assert np.all(peak > 0)


def test_gevp_subset_matches_full():
    A, M = random_spd(20, 2), random_spd(20, 3)
    full = solve_gevp_dense(A, M)
    part = solve_gevp_dense(A, M, count=5)
    np.testing.assert_allclose(part.eigenvalues, full.eigenvalues[:5], rtol=1e-12)


def test_gevp_bit_reproducible():
    A, M = random_spd(15, 8), random_spd(15, 9)
    r1, r2 = solve_gevp_dense(A, M), solve_gevp_dense(A, M)
    assert np.array_equal(r1.eigenvectors, r2.eigenvectors)


def test_extended_precision_quotient():
    A = sp.csr_matrix(np.diag([1.0, 1e8]))
    M = sp.identity(2, format="csr")
    u = np.array([1.0, 1e-9])
    expected = (1.0 + 1e8 * 1e-18) / (1.0 + 1e-18)
    assert abs(rayleigh_quotient(A, M, u) - expected) <= 1e-15
    c = OpCounter()
    energy_products(A, M, u, c, level=0)
    assert c.matvecs == 2
