"""P1 stiffness/mass assembly and inter-level prolongation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh, MeshHierarchy

SYMMETRY_TOL = 1e-12

# Degree-2 rules in barycentric coordinates; weights sum to one.
_TRI_POINTS = np.array([[0.5, 0.5, 0.0], [0.5, 0.0, 0.5], [0.0, 0.5, 0.5]])
_TRI_WEIGHTS = np.full(3, 1.0 / 3.0)
_TET_A = 0.5854101966249685
_TET_B = 0.1381966011250105
_TET_POINTS = np.array([
    [_TET_A, _TET_B, _TET_B, _TET_B],
    [_TET_B, _TET_A, _TET_B, _TET_B],
    [_TET_B, _TET_B, _TET_A, _TET_B],
    [_TET_B, _TET_B, _TET_B, _TET_A],
])
_TET_WEIGHTS = np.full(4, 0.25)


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class ProblemCoefficients:
    """Coefficients of ``-laplace_scale * div(K grad u) + V u``.

    ``diffusion`` maps an ``(q, d)`` array of points to ``(q, d, d)``
    matrices and ``potential`` maps points to ``(q,)`` values; ``None``
    stands for the identity and zero respectively. Both must be vectorised.
    """

    diffusion: Callable[[np.ndarray], np.ndarray] | None = None
    potential: Callable[[np.ndarray], np.ndarray] | None = None
    laplace_scale: float = 1.0


def quadrature_rule(dim: int) -> tuple[np.ndarray, np.ndarray]:
    if dim == 2:
        return _TRI_POINTS, _TRI_WEIGHTS
    return _TET_POINTS, _TET_WEIGHTS


def local_matrices(mesh: Mesh, coeffs: ProblemCoefficients) -> tuple[np.ndarray, np.ndarray]:
    """Element stiffness and mass matrices, shape ``(nc, d+1, d+1)`` each.

    Rows follow ``mesh.cells`` vertex order.
    """
    d = mesh.dim
    x = mesh.vertices[mesh.cells]                      # (nc, d+1, d)
    jac = x[:, 1:, :] - x[:, :1, :]                    # rows are edge vectors
    det = np.linalg.det(jac)
    vol = np.abs(det) / (2.0 if d == 2 else 6.0)
    if np.any(vol <= 0.0):
        raise AssemblyError("mesh has cells with nonpositive volume")

    inv = np.linalg.inv(jac)
    grads = np.empty((mesh.n_cells, d + 1, d))
    grads[:, 1:, :] = np.transpose(inv, (0, 2, 1))
    grads[:, 0, :] = -grads[:, 1:, :].sum(axis=1)

    bary, weights = quadrature_rule(d)
    qpoints = np.einsum("qi,cid->cqd", bary, x)        # (nc, q, d)
    flat_points = qpoints.reshape(-1, d)

    if coeffs.diffusion is None:
        stiff = np.einsum("cid,cjd->cij", grads, grads)
    else:
        kmat = np.asarray(coeffs.diffusion(flat_points), dtype=float).reshape(mesh.n_cells, len(weights), d, d)
        asym = np.max(np.abs(kmat - np.swapaxes(kmat, -1, -2)))
        if asym > SYMMETRY_TOL * max(1.0, float(np.max(np.abs(kmat)))):
            raise AssemblyError(f"diffusion tensor is not symmetric (max asymmetry {asym:.3e})")
        kbar = np.einsum("q,cqab->cab", weights, kmat)
        stiff = np.einsum("cia,cab,cjb->cij", grads, kbar, grads)
    stiff *= (coeffs.laplace_scale * vol)[:, None, None]

    basis_products = np.einsum("q,qi,qj->ij", weights, bary, bary)
    mass = vol[:, None, None] * basis_products[None, :, :]

    if coeffs.potential is not None:
        pot = np.asarray(coeffs.potential(flat_points), dtype=float).reshape(mesh.n_cells, len(weights))
        if np.any(pot < 0.0):
            raise AssemblyError("potential must be nonnegative at every quadrature point")
        stiff = stiff + vol[:, None, None] * np.einsum("cq,q,qi,qj->cij", pot, weights, bary, bary)
    return stiff, mass


def _scatter(mesh: Mesh, local: np.ndarray) -> sp.csr_matrix:
    k = mesh.dim + 1
    rows = np.repeat(mesh.cells, k, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, k)).ravel()
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_vertices,) * 2).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def assemble_level(mesh: Mesh, coeffs: ProblemCoefficients,
                   eliminate_boundary: bool = True) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Global stiffness ``A`` and mass ``M``.

    With ``eliminate_boundary`` (the default) the rows and columns of
    boundary vertices are dropped, imposing ``u = 0`` on the box boundary.
    """
    stiff, mass = local_matrices(mesh, coeffs)
    A = _scatter(mesh, stiff)
    M = _scatter(mesh, mass)
    if eliminate_boundary:
        inner = mesh.interior_vertices
        A = A[inner][:, inner].tocsr()
        M = M[inner][:, inner].tocsr()
        A.sort_indices()
        M.sort_indices()
    return A, M


def build_prolongation(hierarchy: MeshHierarchy, level: int) -> sp.csr_matrix:
    """P1 interpolation from interior DOFs of ``level-1`` to ``level``."""
    if not 1 <= level < hierarchy.n_levels:
        raise IndexError(f"prolongation level {level} outside 1..{hierarchy.n_levels - 1}")
    coarse = hierarchy.levels[level - 1]
    fine = hierarchy.levels[level]
    parents = hierarchy.parents[level]
    cidx = coarse.interior_index
    fine_inner = fine.interior_vertices
    pa, pb = parents[fine_inner, 0], parents[fine_inner, 1]
    same = pa == pb

    rows, cols, vals = [], [], []
    fine_rows = np.arange(fine_inner.size)
    for parent, weight in ((pa[same], 1.0), (pa[~same], 0.5), (pb[~same], 0.5)):
        r = fine_rows[same] if weight == 1.0 else fine_rows[~same]
        c = cidx[parent]
        keep = c >= 0
        rows.append(r[keep])
        cols.append(c[keep])
        vals.append(np.full(np.count_nonzero(keep), weight))
    P = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(fine.n_interior, coarse.n_interior),
    )
    P.sum_duplicates()
    P.sort_indices()
    return P


def composite_prolongation(prolongations: list[sp.csr_matrix | None], start: int, stop: int) -> sp.csr_matrix:
    """Product ``P_stop @ ... @ P_{start+1}``; identity when ``start == stop``.

    ``prolongations[k]`` maps level ``k-1`` to level ``k``.
    """
    if start > stop:
        raise ValueError(f"cannot prolong from level {start} down to {stop}")
    if start == stop:
        n = (prolongations[start + 1].shape[1] if start + 1 < len(prolongations)
             else prolongations[start].shape[0])
        return sp.identity(n, format="csr")
    P = prolongations[start + 1]
    for k in range(start + 2, stop + 1):
        P = prolongations[k] @ P
    P = P.tocsr()
    P.sort_indices()
    return P


@dataclass
class LevelOperators:
    """Per-level interior stiffness, mass and prolongation matrices.

    ``prolongations[0]`` is ``None``; ``prolongations[k]`` maps level
    ``k-1`` to level ``k``. Treated as immutable once built.
    """

    hierarchy: MeshHierarchy
    stiffness: list[sp.csr_matrix]
    mass: list[sp.csr_matrix]
    prolongations: list[sp.csr_matrix | None]

    @property
    def n_levels(self) -> int:
        return len(self.stiffness)

    def dofs(self, level: int) -> int:
        return self.stiffness[level].shape[0]

    def composite(self, start: int, stop: int) -> sp.csr_matrix:
        if start == stop:
            return sp.identity(self.dofs(start), format="csr")
        return composite_prolongation(self.prolongations, start, stop)


def build_level_operators(hierarchy: MeshHierarchy, coeffs: ProblemCoefficients) -> LevelOperators:
    stiffness, mass = [], []
    for mesh in hierarchy.levels:
        A, M = assemble_level(mesh, coeffs)
        stiffness.append(A)
        mass.append(M)
    prolongations = [None] + [build_prolongation(hierarchy, k) for k in range(1, hierarchy.n_levels)]
    return LevelOperators(hierarchy=hierarchy, stiffness=stiffness, mass=mass, prolongations=prolongations)
