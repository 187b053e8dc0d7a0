"""Sparse kernels, conjugate gradients and the dense generalized eigensolver.

Sparse matrices are ``scipy.sparse.csr_matrix`` with sorted indices; the
CSR matvec loops rows in order with a fixed summation order, so results are
bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp


class NumericalError(ArithmeticError):
    """Base class for numerical breakdowns inside the solver."""


class NonFiniteError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message, iterate=None, iterations=0):
        super().__init__(message)
        self.iterate = iterate
        self.iterations = iterations


class NotSPDError(NumericalError):
    pass


@dataclass
class OpCounter:
    """Work counters owned by a single eigenpair's worker.

    ``matvec_rows`` weighs each sparse product by its row count, so it
    tracks work rather than the number of calls.
    """

    matvecs: int = 0
    matvec_rows: int = 0
    cg_steps: int = 0
    per_level: dict = field(default_factory=dict)

    def matvec(self, A, level=None) -> None:
        self.matvecs += 1
        self.matvec_rows += A.shape[0]
        if level is not None:
            self.per_level[level] = self.per_level.get(level, 0) + 1

    def copy(self) -> "OpCounter":
        return OpCounter(self.matvecs, self.matvec_rows, self.cg_steps, dict(self.per_level))


@dataclass
class DenseEigenResult:
    """Ascending eigenvalues and a-normalised eigenvectors (columns)."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def __len__(self) -> int:
        return self.eigenvalues.size


def spmv(A, x: np.ndarray, counter: OpCounter | None = None, level=None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if A.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: matrix {A.shape} times vector of length {x.shape[0]}")
    if counter is not None:
        counter.matvec(A, level)
    return A @ x


def _check_finite(*values) -> None:
    for v in values:
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("non-finite value encountered in conjugate gradients")


def cg_steps(A, rhs, x0, step_count: int, counter: OpCounter | None = None, level=None) -> np.ndarray:
    """Exactly ``step_count`` unpreconditioned CG iterations from ``x0``.

    Stops early only when the residual vanishes exactly.
    """
    x = np.array(x0, dtype=float, copy=True)
    if step_count <= 0:
        return x
    r = rhs - spmv(A, x, counter, level)
    _check_finite(r)
    p = r.copy()
    rr = float(r @ r)
    for _ in range(step_count):
        if rr == 0.0:
            break
        Ap = spmv(A, p, counter, level)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp) or pAp <= 0.0:
            raise NonFiniteError(f"CG breakdown: p^T A p = {pAp!r}")
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = float(r @ r)
        p *= rr_new / rr
        p += r
        rr = rr_new
        if counter is not None:
            counter.cg_steps += 1
    _check_finite(x)
    return x


def cg_solve(A, rhs, x0=None, rel_tol: float = 1e-12, max_iter: int | None = None,
             counter: OpCounter | None = None, level=None) -> tuple[np.ndarray, int]:
    """CG until ``||rhs - A x|| <= rel_tol * ||rhs||``.

    For a zero right-hand side the reference norm is the initial residual.
    Raises :class:`ConvergenceError` after ``max_iter`` iterations
    (default ``max(100, 10 n)``).
    """
    rhs = np.asarray(rhs, dtype=float)
    n = rhs.shape[0]
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float, copy=True)
    max_iter = max(100, 10 * n) if max_iter is None else max_iter
    r = rhs - spmv(A, x, counter, level)
    _check_finite(r)
    ref = float(np.linalg.norm(rhs)) or float(np.linalg.norm(r))
    target = rel_tol * ref
    rr = float(r @ r)
    if np.sqrt(rr) <= target:
        return x, 0
    p = r.copy()
    for it in range(1, max_iter + 1):
        Ap = spmv(A, p, counter, level)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp) or pAp <= 0.0:
            raise NonFiniteError(f"CG breakdown: p^T A p = {pAp!r}")
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = float(r @ r)
        if counter is not None:
            counter.cg_steps += 1
        if np.sqrt(rr_new) <= target:
            _check_finite(x)
            return x, it
        p *= rr_new / rr
        p += r
        rr = rr_new
    raise ConvergenceError(
        f"CG did not reach relative residual {rel_tol:g} in {max_iter} iterations "
        f"(residual {np.sqrt(rr):.3e}, target {target:.3e})",
        iterate=x, iterations=max_iter,
    )


def _dense(mat) -> np.ndarray:
    return mat.toarray() if sp.issparse(mat) else np.asarray(mat, dtype=float)


def a_normalize_columns(A: np.ndarray, X: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.abs(np.einsum("ij,ij->j", X, A @ X)))
    return X / norms


def fix_signs(X: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude entry of every column positive."""
    idx = np.argmax(np.abs(X), axis=0)
    signs = np.sign(X[idx, np.arange(X.shape[1])])
    signs[signs == 0] = 1.0
    return X * signs


def cholesky_lower(M: np.ndarray) -> np.ndarray:
    try:
        return sla.cholesky(M, lower=True)
    except sla.LinAlgError as exc:
        raise NotSPDError("mass matrix not SPD") from exc


def solve_gevp_dense(A, M, count: int | None = None, chol: np.ndarray | None = None) -> DenseEigenResult:
    """Smallest ``count`` eigenpairs of ``A x = lam M x``.

    Reduces to a standard symmetric problem with ``M = L L^T``; eigenvectors
    come back with ``x^T A x = 1``. A precomputed Cholesky factor ``chol``
    of ``M`` may be supplied.
    """
    A = _dense(A)
    M = _dense(M)
    n = A.shape[0]
    if A.shape != (n, n) or M.shape != (n, n):
        raise ValueError(f"shape mismatch: A {A.shape}, M {M.shape}")
    count = n if count is None else int(count)
    if not 1 <= count <= n:
        raise ValueError(f"requested {count} eigenpairs from a problem of dimension {n}")
    L = cholesky_lower(M) if chol is None else chol
    tmp = sla.solve_triangular(L, A, lower=True)
    C = sla.solve_triangular(L, tmp.T, lower=True)
    C = 0.5 * (C + C.T)
    if count < n:
        vals, Y = sla.eigh(C, subset_by_index=(0, count - 1), driver="evr")
    else:
        vals, Y = sla.eigh(C, driver="evd")
    X = sla.solve_triangular(L, Y, lower=True, trans="T")
    X = fix_signs(a_normalize_columns(A, X))
    return DenseEigenResult(eigenvalues=vals, eigenvectors=X)


def energy_products(A, M, u, counter: OpCounter | None = None, level=None) -> tuple[float, float]:
    """``(u^T A u, u^T M u)`` accumulated in extended precision.

    Float64 evaluation loses about ``eps * lambda_max / lambda`` to
    cancellation, which is visible once algebraic errors drop below 1e-11.
    """
    ext = np.longdouble
    u = np.asarray(u, dtype=ext)
    if counter is not None:
        counter.matvec(A, level)
        counter.matvec(M, level)
    return u @ (A.astype(ext) @ u), u @ (M.astype(ext) @ u)


def rayleigh_quotient(A, M, u) -> float:
    num, den = energy_products(A, M, u)
    return float(num / den)
