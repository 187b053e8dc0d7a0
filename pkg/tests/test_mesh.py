import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paseig.mesh import (
    MeshError,
    build_coarse_mesh,
    build_hierarchy,
    read_mesh_dump,
    refine_uniform,
    write_mesh,
)

UNIT_SQUARE = ((0.0, 1.0), (0.0, 1.0))
UNIT_CUBE = ((0.0, 1.0),) * 3


def test_square_divisions_2_counts():
    mesh = build_coarse_mesh(UNIT_SQUARE, 2)
    assert (mesh.n_vertices, mesh.n_cells, mesh.n_interior) == (9, 8, 1)


def test_cube_divisions_2_counts():
    mesh = build_coarse_mesh(UNIT_CUBE, 2)
    assert (mesh.n_vertices, mesh.n_cells, mesh.n_interior) == (27, 48, 1)


def test_large_box_all_tets_positive():
    mesh = build_coarse_mesh(((-4.0, 4.0),) * 3, 8)
    assert mesh.n_cells == 3072
    assert np.all(mesh.signed_volumes() > 0)


def test_refine_square_counts():
    fine, parents = refine_uniform(build_coarse_mesh(UNIT_SQUARE, 2))
    assert (fine.n_cells, fine.n_vertices, fine.n_interior) == (32, 25, 9)
    assert parents.shape == (25, 2)


@pytest.mark.parametrize("box,divisions", [(UNIT_SQUARE, 3), (UNIT_CUBE, 2), (((-1.0, 2.0), (0.0, 0.5)), 2)])
def test_child_volumes_partition_parent(box, divisions):
    coarse = build_coarse_mesh(box, divisions)
    fine, _ = refine_uniform(coarse)
    per_parent = fine.volumes().reshape(coarse.n_cells, -1).sum(axis=1)
    np.testing.assert_allclose(per_parent, coarse.volumes(), rtol=0, atol=1e-12)


def test_refined_twice_matches_direct_vertex_set():
    mesh = build_coarse_mesh(UNIT_SQUARE, 2)
    for _ in range(2):
        mesh, _ = refine_uniform(mesh)
    direct = build_coarse_mesh(UNIT_SQUARE, 8)

    def key(v):
        return v[np.lexsort(v.T[::-1])]

    np.testing.assert_array_equal(key(mesh.vertices), key(direct.vertices))


def test_hierarchy_interior_counts():
    hier = build_hierarchy(UNIT_SQUARE, 4, 4)
    assert hier.interior_counts() == [9, 49, 225, 961]


def test_single_level_hierarchy():
    hier = build_hierarchy(UNIT_SQUARE, 4, 1)
    assert hier.n_levels == 1
    assert hier.interior_counts() == [9]


@pytest.mark.parametrize("box,ratio", [(UNIT_SQUARE, 4), (UNIT_CUBE, 8)])
def test_cell_ratio_per_level(box, ratio):
    hier = build_hierarchy(box, 2, 3)
    cells = [m.n_cells for m in hier.levels]
    assert cells[1] == ratio * cells[0] and cells[2] == ratio * cells[1]


def test_rejects_zero_levels_and_cap():
    with pytest.raises(MeshError):
        build_hierarchy(UNIT_SQUARE, 4, 0)
    with pytest.raises(MeshError, match="cap"):
        build_hierarchy(UNIT_SQUARE, 4, 6, max_dofs=1000)


def test_rejects_bad_coarse_input():
    with pytest.raises(MeshError):
        build_coarse_mesh(UNIT_SQUARE, 0)
    with pytest.raises(MeshError):
        build_coarse_mesh(((0.0, 0.0), (0.0, 1.0)), 2)


@pytest.mark.parametrize("box", [UNIT_SQUARE, UNIT_CUBE])
def test_nestedness_and_volume(box):
    hier = build_hierarchy(box, 2, 3)
    for k in range(1, hier.n_levels):
        coarse, fine = hier.levels[k - 1], hier.levels[k]
        parents = hier.parents[k]
        inherited = parents[:, 0] == parents[:, 1]
        np.testing.assert_array_equal(fine.vertices[inherited], coarse.vertices[parents[inherited, 0]])
        mid = ~inherited
        np.testing.assert_allclose(
            fine.vertices[mid], 0.5 * (coarse.vertices[parents[mid, 0]] + coarse.vertices[parents[mid, 1]]))
    for mesh in hier.levels:
        assert abs(mesh.volumes().sum() - 1.0) < 1e-10


@pytest.mark.parametrize("box", [UNIT_SQUARE, UNIT_CUBE])
def test_conforming(box):
    # Every interior facet is shared by exactly two cells, boundary facets by one.
    mesh = build_hierarchy(box, 2, 3).finest
    d = mesh.dim
    facets = np.concatenate([np.delete(mesh.cells, j, axis=1) for j in range(d + 1)])
    _, counts = np.unique(np.sort(facets, axis=1), axis=0, return_counts=True)
    assert set(counts.tolist()) <= {1, 2}
    boundary_facets = np.count_nonzero(counts == 1)
    n = mesh.resolution
    expected = 4 * n if d == 2 else 12 * n * n
    assert boundary_facets == expected


def test_shape_regularity_preserved_3d():
    hier = build_hierarchy(UNIT_CUBE, 1, 4)
    shapes = []
    for mesh in hier.levels:
        x = mesh.vertices[mesh.cells]
        edges = np.linalg.norm(x[:, :, None, :] - x[:, None, :, :], axis=-1).max(axis=(1, 2))
        shapes.append(np.max(edges ** 3 / mesh.volumes()))
    np.testing.assert_allclose(shapes, shapes[0], rtol=1e-9)


def test_mesh_dump_roundtrip(tmp_path):
    mesh = build_coarse_mesh(UNIT_SQUARE, 3)
    write_mesh(mesh, tmp_path / "m.txt")
    vertices, cells = read_mesh_dump(tmp_path / "m.txt")
    np.testing.assert_allclose(vertices, mesh.vertices)
    np.testing.assert_array_equal(cells, mesh.oriented_cells)


@settings(max_examples=25, deadline=None)
@given(
    d=st.sampled_from([2, 3]),
    divisions=st.integers(1, 3),
    lo=st.floats(-5, 5),
    width=st.floats(0.1, 10),
)
def test_counts_property(d, divisions, lo, width):
    box = ((lo, lo + width),) * d
    mesh = build_coarse_mesh(box, divisions)
    assert mesh.n_vertices == (divisions + 1) ** d
    assert mesh.n_cells == (2 if d == 2 else 6) * divisions ** d
    assert mesh.n_interior == (divisions - 1) ** d
    assert np.all(mesh.signed_volumes(mesh.oriented_cells) > 0)
    assert abs(mesh.volumes().sum() - width ** d) <= 1e-10 * width ** d
