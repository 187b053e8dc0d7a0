"""One correction step: inexact source solve plus a small eigenproblem on
the coarse space augmented by the corrected vector."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .assembly import LevelOperators
from .linalg import (
    DenseEigenResult,
    NumericalError,
    OpCounter,
    cholesky_lower,
    energy_products,
    solve_gevp_dense,
    spmv,
)
from .multigrid import MgConfig, mg_solve

DEGENERACY_TOL = 1e-14


class DegenerateAugmentedSpace(NumericalError):
    """The corrected vector lies numerically inside the coarse space."""


@dataclass
class EigenPairState:
    """One eigenpair approximation at a given level, with ``u^T A u = 1``.

    ``history`` rows are ``(level, iteration, eigenvalue, residual)``.
    """

    index: int
    level: int
    eigenvalue: float
    vector: np.ndarray
    history: list = field(default_factory=list)
    counter: OpCounter = field(default_factory=OpCounter)
    failed: bool = False
    error: str | None = None
    wall_time: float = 0.0


@dataclass
class CoarseData:
    """Dense coarse matrices and the embeddings of V_H into every level."""

    A: np.ndarray
    M: np.ndarray
    chol: np.ndarray
    embeddings: list[sp.csr_matrix]
    coarse_level: int = 0

    @property
    def dim(self) -> int:
        return self.A.shape[0]


def build_coarse_data(ops: LevelOperators, coarse_level: int = 0) -> CoarseData:
    A = ops.stiffness[coarse_level].toarray()
    M = ops.mass[coarse_level].toarray()
    embeddings = [None] * coarse_level + [ops.composite(coarse_level, k)
                                          for k in range(coarse_level, ops.n_levels)]
    return CoarseData(A=A, M=M, chol=cholesky_lower(M), embeddings=embeddings, coarse_level=coarse_level)


@dataclass
class BorderedSystem:
    A_H: np.ndarray
    b_vec: np.ndarray
    beta_scalar: float
    M_H: np.ndarray
    c_vec: np.ndarray
    zeta_scalar: float

    def stiffness(self) -> np.ndarray:
        return _border(self.A_H, self.b_vec, self.beta_scalar)

    def mass(self) -> np.ndarray:
        return _border(self.M_H, self.c_vec, self.zeta_scalar)


def _border(block, vec, corner) -> np.ndarray:
    n = block.shape[0]
    out = np.empty((n + 1, n + 1))
    out[:n, :n] = block
    out[:n, n] = vec
    out[n, :n] = vec
    out[n, n] = corner
    return out


def select_tracked(candidates: DenseEigenResult, c_vec, zeta: float) -> int:
    """Index of the candidate with the largest |b(candidate, u_tilde)|.

    Candidates are columns ``(u_H, alpha)`` of the bordered eigenproblem.
    Eigenvalues are ascending, so taking the first maximum breaks ties
    towards the smaller eigenvalue and then the smaller index.
    """
    X = candidates.eigenvectors
    n = len(c_vec)
    scores = np.abs(X[:n, :].T @ c_vec + X[n, :] * zeta)
    return int(np.argmax(scores))


def _bordered_cholesky(mass: np.ndarray) -> np.ndarray:
    L = cholesky_lower(mass) if np.all(np.isfinite(mass)) else None
    if L is None:
        raise DegenerateAugmentedSpace("bordered mass matrix is not finite")
    if np.min(np.diag(L)) ** 2 < DEGENERACY_TOL * np.trace(mass):
        raise DegenerateAugmentedSpace("augmented space degenerate: corrected vector lies in the coarse space")
    return L


def bordered_system(ops: LevelOperators, coarse: CoarseData, level: int, u_tilde: np.ndarray,
                    counter: OpCounter | None = None) -> BorderedSystem:
    """Couplings of ``u_tilde`` with V_H, built as restriction of matvecs."""
    P = coarse.embeddings[level]
    Au = spmv(ops.stiffness[level], u_tilde, counter, level)
    Mu = spmv(ops.mass[level], u_tilde, counter, level)
    return BorderedSystem(
        A_H=coarse.A, b_vec=spmv(P.T, Au, counter, level), beta_scalar=float(u_tilde @ Au),
        M_H=coarse.M, c_vec=spmv(P.T, Mu, counter, level), zeta_scalar=float(u_tilde @ Mu),
    )


def algebraic_residual(ops: LevelOperators, level: int, eigenvalue: float, u) -> float:
    """``||A u - eigenvalue M u||_2`` at ``level``."""
    return float(np.linalg.norm(ops.stiffness[level] @ u - eigenvalue * (ops.mass[level] @ u)))


def correction_step(ops: LevelOperators, coarse: CoarseData, state: EigenPairState,
                    mg_config: MgConfig, iteration: int = 0) -> EigenPairState:
    """One correction of ``state``; returns a new state, the input is untouched."""
    k = state.level
    counter = state.counter.copy()
    A = ops.stiffness[k]
    M = ops.mass[k]
    u = state.vector

    Mu = spmv(M, u, counter, k)
    rhs = state.eigenvalue * Mu
    u_tilde = mg_solve(ops, k, rhs, u, mg_config, counter)

    if k == coarse.coarse_level:
        # V_H + span{u_tilde} is V_H itself here. The exact solve amplifies
        # lower modes in u_tilde, so track the incoming vector instead.
        result = solve_gevp_dense(coarse.A, coarse.M, chol=coarse.chol)
        pick = int(np.argmax(np.abs(result.eigenvectors.T @ Mu)))
        new_u = result.eigenvectors[:, pick].copy()
    else:
        system = bordered_system(ops, coarse, k, u_tilde, counter)
        Ab, Mb = system.stiffness(), system.mass()
        result = solve_gevp_dense(Ab, Mb, chol=_bordered_cholesky(Mb))
        pick = select_tracked(result, system.c_vec, system.zeta_scalar)
        x = result.eigenvectors[:, pick]
        new_u = spmv(coarse.embeddings[k], x[:-1], counter, k) + x[-1] * u_tilde

    # The Rayleigh quotient of the reconstructed vector equals the Ritz value
    # but avoids the rounding of the Cholesky-reduced problem.
    a_uu, b_uu = energy_products(A, M, new_u, counter, k)
    new_lambda = float(a_uu / b_uu)
    new_u /= float(np.sqrt(a_uu))
    if float(new_u @ Mu) < 0.0:
        new_u = -new_u
    if not np.all(np.isfinite(new_u)) or not np.isfinite(new_lambda):
        raise NumericalError("non-finite eigenpair after correction")

    residual = algebraic_residual(ops, k, new_lambda, new_u)
    return EigenPairState(
        index=state.index, level=k, eigenvalue=new_lambda, vector=new_u,
        history=state.history + [(k, iteration, new_lambda, residual)],
        counter=counter, wall_time=state.wall_time,
    )
