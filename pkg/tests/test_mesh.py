import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import cube, square
from stressdg.mesh import (
    DIRICHLET,
    INTERIOR,
    NEUMANN,
    Mesh,
    MeshError,
    barycentric_refine,
    generate_disk,
    generate_structured,
    perturb_interior,
    read_mesh,
    side_predicate,
    tag_boundary,
    write_mesh,
)


@pytest.mark.parametrize("dim,n,cells", [(2, 3, 18), (3, 2, 48)])
def test_structured_counts_and_volume(dim, n, cells):
    mesh = generate_structured(n, dim)
    assert mesh.n_cells == cells
    assert mesh.n_vertices == (n + 1) ** dim
    assert_allclose(mesh.cell_volumes.sum(), 1.0, rtol=1e-13)
    assert np.all(mesh.cell_volumes > 0)


def test_structured_2d_facets():
    mesh = generate_structured(2, 2)
    # every cell has 3 edges: 3 * cells = 2 * interior + boundary
    assert mesh.count("interior") == (3 * 8 - 8) // 2
    assert len(mesh.boundary_facets) == 8
    assert_allclose(mesh.facet_areas[mesh.boundary_facets].sum(), 4.0)


def test_facet_normals_point_out_of_first_cell():
    mesh = generate_structured(3, 2)
    centers = mesh.vertices[mesh.cells].mean(axis=1)
    fcenters = mesh.vertices[mesh.facet_vertices].mean(axis=1)
    c0 = mesh.facet_cells[:, 0]
    assert np.all(np.einsum("fi,fi->f", mesh.facet_normals, fcenters - centers[c0]) > 0)
    assert_allclose(np.linalg.norm(mesh.facet_normals, axis=1), 1.0)


def test_facet_heights_bounded_by_cell_and_facet_sizes():
    mesh = square(4, bary=True)
    h = mesh.facet_heights()
    assert np.all(h > 0)
    c0 = mesh.facet_cells[:, 0]
    assert np.all(h <= mesh.cell_diameters[c0] + 1e-14)
    # right isosceles triangle with legs 1/n: height onto the hypotenuse is 1/(sqrt(2) n)
    plain = generate_structured(2, 2)
    hyp = np.isclose(plain.facet_areas, math.sqrt(2) / 2)
    assert_allclose(plain.facet_heights()[hyp], 1 / (2 * math.sqrt(2)))


def test_barycentric_refine_preserves_volume_and_boundary():
    base = square(3, sides=("y0",))
    fine = barycentric_refine(base)
    assert fine.n_cells == 3 * base.n_cells
    assert_allclose(fine.cell_volumes.sum(), 1.0)
    assert fine.count("dirichlet") == base.count("dirichlet") == 3
    assert fine.count("neumann") == base.count("neumann")
    fine3 = barycentric_refine(generate_structured(1, 3))
    assert fine3.n_cells == 24
    assert_allclose(fine3.cell_volumes.sum(), 1.0)


def test_tagging_sides():
    mesh = square(4, sides=("y0",))
    dir_f = mesh.boundary_facets[mesh.facet_kind[mesh.boundary_facets] == DIRICHLET]
    assert_allclose(mesh.vertices[mesh.facet_vertices[dir_f]][..., 1], 0.0)
    assert mesh.count("neumann") == 12
    with pytest.raises(MeshError):
        tag_boundary(generate_structured(2, 2), side_predicate("none"))
    with pytest.raises(ValueError, match="unknown side"):
        side_predicate(["q1"])


def test_perturb_moves_only_interior_vertices():
    base = square(6, sides=("x0",))
    moved = perturb_interior(base, 0.2 / 6, seed=3)
    shift = np.linalg.norm(moved.vertices - base.vertices, axis=1)
    on_bnd = np.zeros(base.n_vertices, dtype=bool)
    on_bnd[base.facet_vertices[base.boundary_facets].ravel()] = True
    assert np.all(shift[on_bnd] == 0)
    assert shift[~on_bnd].max() <= 0.2 / 6 + 1e-15
    assert shift[~on_bnd].min() > 0
    assert_allclose(moved.cell_volumes.sum(), 1.0)
    assert moved.count("dirichlet") == base.count("dirichlet")
    again = perturb_interior(base, 0.2 / 6, seed=3)
    assert np.array_equal(again.vertices, moved.vertices)


def test_disk_area_converges_quadratically():
    errs = [abs(generate_disk(n).cell_volumes.sum() - math.pi) for n in (4, 8, 16)]
    rates = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert min(rates) > 1.9
    disk = generate_disk(4)
    r = np.linalg.norm(disk.vertices[disk.facet_vertices[disk.boundary_facets]], axis=-1)
    assert_allclose(r, 1.0)
    assert disk.count("dirichlet") == len(disk.boundary_facets)


def test_mesh_rejects_inverted_or_degenerate_cells():
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    with pytest.raises(MeshError):
        Mesh(verts, [[0, 1, 2]])


def test_native_roundtrip(tmp_path):
    mesh = perturb_interior(square(3, sides=("x1", "y0")), 0.05, seed=1)
    path = tmp_path / "m.mesh"
    write_mesh(mesh, path)
    back = read_mesh(path)
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.cells, mesh.cells)
    assert back.boundary_tags == mesh.boundary_tags


MSH = """$MeshFormat
2.2 0 8
$EndMeshFormat
$PhysicalNames
3
1 1 "Dirichlet"
1 2 "Neumann"
2 3 "body"
$EndPhysicalNames
$Nodes
4
1 0 0 0
2 1 0 0
3 1 1 0
4 0 1 0
$EndNodes
$Elements
6
1 1 2 1 1 1 2
2 1 2 2 2 2 3
3 1 2 2 2 3 4
4 1 2 2 2 4 1
5 2 2 3 1 1 2 3
6 2 2 3 1 1 3 4
$EndElements
"""


def test_read_msh22(tmp_path):
    path = tmp_path / "sq.msh"
    path.write_text(MSH)
    mesh = read_mesh(path)
    assert mesh.dim == 2 and mesh.n_cells == 2
    assert mesh.count("dirichlet") == 1 and mesh.count("neumann") == 3
    assert set(np.unique(mesh.cell_subdomain)) == {3}
    bad = tmp_path / "v4.msh"
    bad.write_text(MSH.replace("2.2 0 8", "4.1 0 8"))
    with pytest.raises(MeshError, match="format version"):
        read_mesh(bad)


def test_kinds_partition_facets():
    mesh = cube(2, sides=("z0",))
    kinds = mesh.facet_kind
    assert set(np.unique(kinds)) == {INTERIOR, DIRICHLET, NEUMANN}
    assert np.all(mesh.facet_cells[kinds == INTERIOR, 1] >= 0)
    assert np.all(mesh.facet_cells[kinds != INTERIOR, 1] == -1)
    assert len(mesh.dg_facets) == mesh.count("interior") + mesh.count("neumann")
