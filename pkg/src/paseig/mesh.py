"""Simplicial meshes on axis-aligned boxes and their nested red refinements.

Vertices carry integer lattice coordinates alongside the float coordinates,
so that nestedness, boundary flags and refinement ordering are decided by
index bookkeeping rather than by comparing floats.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

REFINEMENT_INDEX = 2

# Children of a triangle (v0, v1, v2) with edge midpoints m01, m02, m12,
# written as indices into the 6-tuple (v0, v1, v2, m01, m02, m12).
_TRI_CHILDREN = np.array([[0, 3, 4], [3, 1, 5], [4, 5, 2], [3, 5, 4]])

# Bey's red refinement of a tetrahedron (x0, x1, x2, x3), indices into
# (x0, x1, x2, x3, x01, x02, x03, x12, x13, x23). For a Kuhn simplex listed
# in path order all eight children are again Kuhn simplices in path order.
_TET_CHILDREN = np.array([
    [0, 4, 5, 6],
    [4, 1, 7, 8],
    [5, 7, 2, 9],
    [6, 8, 9, 3],
    [4, 5, 6, 8],
    [4, 5, 7, 8],
    [5, 6, 8, 9],
    [5, 7, 8, 9],
])


class MeshError(ValueError):
    """Raised for invalid mesh input or configurations exceeding limits."""


@dataclass
class Mesh:
    """Conforming simplicial mesh of a box.

    ``cells`` are stored in lattice path order (each step adds one lattice
    unit vector in 3D), which is what keeps red refinement self-similar.
    ``orientation`` is the sign of each cell's determinant in that order;
    :attr:`oriented_cells` gives the positively oriented listing.
    """

    box: np.ndarray            # (d, 2) lower/upper bounds
    resolution: int            # lattice cells per axis
    lattice: np.ndarray        # (nv, d) integer coordinates in 0..resolution
    cells: np.ndarray          # (nc, d+1) vertex indices
    orientation: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.box.shape[0]

    @property
    def vertices(self) -> np.ndarray:
        lo, hi = self.box[:, 0], self.box[:, 1]
        return lo + (hi - lo) * (self.lattice / self.resolution)

    @property
    def n_vertices(self) -> int:
        return self.lattice.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def boundary(self) -> np.ndarray:
        return np.any((self.lattice == 0) | (self.lattice == self.resolution), axis=1)

    @property
    def interior_index(self) -> np.ndarray:
        """Interior DOF number of each vertex, ``-1`` on the boundary."""
        index = np.full(self.n_vertices, -1, dtype=np.int64)
        inner = ~self.boundary
        index[inner] = np.arange(np.count_nonzero(inner))
        return index

    @property
    def interior_vertices(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary)

    @property
    def n_interior(self) -> int:
        return int(np.count_nonzero(~self.boundary))

    @property
    def mesh_size(self) -> float:
        """Longest edge length (all cells are congruent up to reflection)."""
        extent = (self.box[:, 1] - self.box[:, 0]) / self.resolution
        return float(np.sqrt(np.sum(extent ** 2)))

    @property
    def oriented_cells(self) -> np.ndarray:
        cells = self.cells.copy()
        flip = self.orientation < 0
        cells[flip, -2], cells[flip, -1] = self.cells[flip, -1], self.cells[flip, -2]
        return cells

    def signed_volumes(self, cells: np.ndarray | None = None) -> np.ndarray:
        cells = self.oriented_cells if cells is None else cells
        x = self.vertices[cells]
        jac = x[:, 1:, :] - x[:, :1, :]
        return np.linalg.det(jac) / _factorial(self.dim)

    def volumes(self) -> np.ndarray:
        return np.abs(self.signed_volumes(self.cells))

    def check(self) -> None:
        """Validate the structural invariants; raises :class:`MeshError`."""
        if np.any(self.signed_volumes() <= 0.0):
            raise MeshError("mesh has cells with nonpositive volume")
        on_face = np.any(
            np.isclose(self.vertices[:, None, :], self.box.T[None, :, :], rtol=0.0, atol=1e-12),
            axis=(1, 2),
        )
        if not np.array_equal(on_face, self.boundary):
            raise MeshError("boundary flags disagree with box faces")


@dataclass
class MeshHierarchy:
    """Nested uniformly refined meshes; ``levels[0]`` is the coarse mesh.

    ``parents[k]`` (for ``k >= 1``) is an ``(nv_k, 2)`` array: a fine vertex
    inherited from level ``k-1`` stores ``(v, v)``, an edge midpoint stores
    the two coarse endpoints.
    """

    levels: list[Mesh]
    parents: list[np.ndarray | None]
    beta: int = REFINEMENT_INDEX

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def finest(self) -> Mesh:
        return self.levels[-1]

    def interior_counts(self) -> list[int]:
        return [mesh.n_interior for mesh in self.levels]


def _factorial(d: int) -> int:
    return 2 if d == 2 else 6


def _as_box(box) -> np.ndarray:
    box = np.asarray(box, dtype=float)
    if box.ndim != 2 or box.shape[1] != 2 or box.shape[0] not in (2, 3):
        raise MeshError(f"box must be a (d, 2) array of bounds with d in (2, 3), got shape {box.shape}")
    if not np.all(np.isfinite(box)) or np.any(box[:, 1] <= box[:, 0]):
        raise MeshError(f"box has nonpositive extent: {box.tolist()}")
    return box


def _orientation(lattice: np.ndarray, cells: np.ndarray) -> np.ndarray:
    x = lattice[cells].astype(np.int64)
    jac = x[:, 1:, :] - x[:, :1, :]
    # Lattice determinants are small integers; rounding is exact.
    return np.sign(np.rint(np.linalg.det(jac))).astype(np.int8)


def build_coarse_mesh(box, divisions: int) -> Mesh:
    """Tensor grid of ``divisions`` cells per axis split into simplices.

    Squares are cut into 2 triangles along the main diagonal, cubes into the
    6 Kuhn (Freudenthal) tetrahedra sharing the main diagonal.
    """
    box = _as_box(box)
    if int(divisions) != divisions or divisions < 1:
        raise MeshError(f"divisions must be a positive integer, got {divisions!r}")
    divisions = int(divisions)
    d = box.shape[0]

    axes = [np.arange(divisions + 1)] * d
    # Last axis varies fastest in the vertex numbering.
    lattice = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    strides = (divisions + 1) ** np.arange(d - 1, -1, -1)

    origins = np.stack(np.meshgrid(*[np.arange(divisions)] * d, indexing="ij"), axis=-1).reshape(-1, d)
    cells = []
    for perm in itertools.permutations(range(d)):
        path = [np.zeros(d, dtype=np.int64)]
        for axis in perm:
            step = path[-1].copy()
            step[axis] += 1
            path.append(step)
        corners = np.stack([(origins + p) @ strides for p in path], axis=1)
        cells.append(corners)
    cells = np.concatenate(cells, axis=0)
    # Group the simplices of one grid cell together.
    n_cubes = origins.shape[0]
    order = np.arange(cells.shape[0]).reshape(-1, n_cubes).T.ravel()
    cells = cells[order]

    return Mesh(box=box, resolution=divisions, lattice=lattice, cells=cells,
                orientation=_orientation(lattice, cells))


def refine_uniform(mesh: Mesh) -> tuple[Mesh, np.ndarray]:
    """Red refinement: every simplex is split into ``2**d`` children.

    Returns the refined mesh and the parent array described on
    :class:`MeshHierarchy`. Coarse vertices keep their indices; midpoint
    vertices follow in the order of the sorted unique edge list.
    """
    d = mesh.dim
    nv = mesh.n_vertices
    local_edges = list(itertools.combinations(range(d + 1), 2))
    edges = np.stack([mesh.cells[:, [i, j]] for i, j in local_edges], axis=1)
    edges = np.sort(edges, axis=2)
    flat = edges.reshape(-1, 2)
    unique, inverse = np.unique(flat, axis=0, return_inverse=True)
    midpoint_ids = (nv + inverse.reshape(edges.shape[:2])).astype(np.int64)

    lattice = np.concatenate([2 * mesh.lattice, mesh.lattice[unique[:, 0]] + mesh.lattice[unique[:, 1]]])
    parents = np.concatenate([np.repeat(np.arange(nv)[:, None], 2, axis=1), unique])

    extended = np.concatenate([mesh.cells, midpoint_ids], axis=1)
    table = _TRI_CHILDREN if d == 2 else _TET_CHILDREN
    children = extended[:, table].reshape(-1, d + 1)

    fine = Mesh(box=mesh.box, resolution=2 * mesh.resolution, lattice=lattice,
                cells=children, orientation=_orientation(lattice, children))
    return fine, parents


def build_hierarchy(box, divisions: int, n_levels: int, max_dofs: int | None = None) -> MeshHierarchy:
    """Coarse mesh plus ``n_levels - 1`` uniform refinements.

    ``max_dofs`` caps the interior DOF count of the finest level; the check
    happens before any refinement is carried out.
    """
    if int(n_levels) != n_levels or n_levels < 1:
        raise MeshError(f"level count must be >= 1, got {n_levels!r}")
    n_levels = int(n_levels)
    box = _as_box(box)
    if max_dofs is not None:
        finest = (int(divisions) * REFINEMENT_INDEX ** (n_levels - 1) - 1) ** box.shape[0]
        if finest > max_dofs:
            raise MeshError(
                f"finest level would have {finest} interior DOFs, above the cap of {max_dofs}; "
                "reduce levels or divisions, or raise the cap"
            )
    levels = [build_coarse_mesh(box, divisions)]
    parents: list[np.ndarray | None] = [None]
    for _ in range(n_levels - 1):
        fine, parent = refine_uniform(levels[-1])
        levels.append(fine)
        parents.append(parent)
    return MeshHierarchy(levels=levels, parents=parents)


def write_mesh(mesh: Mesh, path) -> None:
    """Plain-text dump: ``d nv nc`` header, coordinates, then cells."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{mesh.dim} {mesh.n_vertices} {mesh.n_cells}\n")
        for point in mesh.vertices:
            fh.write(" ".join(format(c, ".17g") for c in point) + "\n")
        for cell in mesh.oriented_cells:
            fh.write(" ".join(str(int(v)) for v in cell) + "\n")


def read_mesh_dump(path) -> tuple[np.ndarray, np.ndarray]:
    """Read back a :func:`write_mesh` file as ``(vertices, cells)``."""
    with open(path, encoding="utf-8") as fh:
        d, nv, nc = (int(t) for t in fh.readline().split())
        vertices = np.array([[float(t) for t in fh.readline().split()] for _ in range(nv)]).reshape(nv, d)
        cells = np.array([[int(t) for t in fh.readline().split()] for _ in range(nc)]).reshape(nc, d + 1)
    return vertices, cells
