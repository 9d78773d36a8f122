import csv

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import square
from stressdg.analysis import (
    RateStudy,
    convergence_rates,
    flag_drift,
    infsup_constant,
    match_nearest,
    recover_displacement,
    run_rate_study,
    spurious_scan,
)
from stressdg.assembly import PenaltyConfig
from stressdg.fem import DGSpace
from stressdg.material import IsotropicMaterial
from stressdg.mesh import Mesh, perturb_interior
from stressdg.problems import Problem, homogeneous


def test_rate_formula_recovers_power():
    h = np.array([0.5, 0.25, 0.125, 0.0625])
    for p in (1.0, 2.0, 4.0, 5.5):
        rates, flags = convergence_rates(h, 3.0 * h**p)
        assert_allclose(rates, p, atol=1e-12)
        assert not flags.any()


def test_rate_formula_degenerate_inputs():
    rates, flags = convergence_rates([0.5, 0.25, 0.125], [1e-3, 1e-3, 0.0])
    assert rates[0] == 0.0 and flags[0]
    assert np.isnan(rates[1]) and flags[1]


def test_match_nearest_is_one_to_one():
    out, conflict = match_nearest([1.0, 2.0, 2.1], [2.05, 0.9, 5.0])
    assert_allclose(out, [0.9, 2.05, 5.0])
    assert conflict.tolist() == [False, False, True]


def test_rate_study_table_and_csv(tmp_path):
    h = np.array([0.5, 0.25, 0.125])
    ref = np.array([1.0, 2.0])
    values = ref + np.column_stack([h**2, h**4])
    values[2, 1] = np.nan
    study = RateStudy(h, 2, 8.0, values, ref, "analytic")
    assert_allclose(study.rates[:, 0], 2.0)
    assert_allclose(study.rates[0, 1], 4.0)
    assert study.flags[1, 1] and not study.flags[0, 1]
    assert_allclose(study.average_rates, [2.0, 4.0])
    assert study.monotone()[0]
    path = tmp_path / "study.csv"
    study.write_csv(path, "seed 0")
    rows = list(csv.reader(path.read_text().splitlines()[1:]))
    assert rows[0] == ["h", "k", "a0", "eig_index", "value", "reference", "rate", "flag"]
    assert len(rows) == 1 + 3 * 2
    assert "analytic" in study.summary()


def test_run_rate_study_needs_three_meshes():
    with pytest.raises(ValueError, match="three"):
        run_rate_study(Problem(), [2, 4], references=[1.0])
    with pytest.raises(ValueError, match="references"):
        run_rate_study(Problem(), [2, 4, 8])


def airy(x):
    X, Y = x[..., 0], x[..., 1]
    s = np.zeros(x.shape[:-1] + (2, 2))
    s[..., 0, 0] = 2.0 * X
    s[..., 1, 1] = 6.0 * X * Y
    s[..., 0, 1] = s[..., 1, 0] = -3.0 * Y**2 + 0.0 * X
    return s


def x_e1e1(x):
    s = np.zeros(x.shape[:-1] + (2, 2))
    s[..., 0, 0] = x[..., 0]
    return s


def test_recover_displacement_examples():
    mesh = perturb_interior(square(2), 0.05, seed=1)
    space = DGSpace(mesh, 2)
    mat = IsotropicMaterial.homogeneous(2)
    # phi = x^3 y^... pick a field with zero divergence: rows (2, -6 y + 6 y)... check numerically
    div_free = space.project(lambda x: _div_free(x))
    u = recover_displacement(div_free, 2.0, mat, space)
    assert np.abs(u.coeffs).max() < 1e-12
    u = recover_displacement(space.project(x_e1e1), 2.0, mat, space)
    pts = mesh.vertices[mesh.cells[3]].mean(axis=0)[None]
    assert_allclose(u.evaluate(3, pts), [[-1.0, 0.0]], atol=1e-12)
    u5 = recover_displacement(5 * space.project(x_e1e1), 2.0, mat, space)
    assert_allclose(u5.coeffs, 5 * u.coeffs, atol=1e-13)
    heavy = IsotropicMaterial.homogeneous(2, rho=4.0)
    u_heavy = recover_displacement(space.project(x_e1e1), 3.0, heavy, space)
    assert_allclose(u_heavy.evaluate(3, pts), [[-1.0 / 8.0, 0.0]], atol=1e-12)
    with pytest.raises(ValueError, match="kernel"):
        recover_displacement(div_free, 1.0, mat, space)


def _div_free(x):
    """Airy stress of phi = x^2 y^2: (phi_yy, -phi_xy; -phi_xy, phi_xx)."""
    X, Y = x[..., 0], x[..., 1]
    s = np.zeros(x.shape[:-1] + (2, 2))
    s[..., 0, 0] = 2 * X**2
    s[..., 1, 1] = 2 * Y**2
    s[..., 0, 1] = s[..., 1, 0] = -4 * X * Y
    return s


def test_flag_drift_detects_moving_values():
    runs = [np.array([1.0, 2.0, 2.5, 3.0, 4.0]), np.array([1.001, 2.002, 3.0, 3.3, 4.0]), np.array([1.0, 2.0, 3.0, 4.0, 5.0])]
    flags = flag_drift(runs, n_eigs=4, drift_tol=0.02)
    assert flags[0].tolist() == [False, False, True, False]
    assert flags[1].tolist() == [False, False, False, True]
    assert not flags[2].any()


def test_spurious_scan_validation():
    with pytest.raises(ValueError, match="need >= 2 penalty values"):
        spurious_scan(Problem(), [4.0])


def test_spurious_scan_barycentric_mesh_is_clean():
    # on very coarse meshes the genuine eigenvalues still move by several percent with
    # a0, so the mesh has to resolve the low modes before drift means "spurious"
    p = Problem(n=8, barycentric=True, dirichlet=("y0",), k=1)
    report = spurious_scan(p, [2.0, 4.0, 8.0], n_eigs=6)
    assert report.flagged == []
    assert len(report.omegas) == 3 and all(len(o) == 6 for o in report.omegas)
    assert "a0=" in report.table()


def test_infsup_two_triangle_meshes():
    plain, bary = square(1), square(1, bary=True)
    b_bary = infsup_constant(bary, 1)
    assert b_bary > 0.05
    assert infsup_constant(plain, 1) <= 1e-8 or infsup_constant(plain, 1) < 0.1 * b_bary


def test_infsup_scale_invariance_and_determinism():
    mesh = square(2, bary=True)
    big = Mesh(2.0 * mesh.vertices, mesh.cells, mesh.cell_subdomain, mesh.boundary_tags)
    b = infsup_constant(mesh, 1)
    assert abs(infsup_constant(big, 1) - b) < 1e-10
    assert infsup_constant(mesh, 1) == b


def test_infsup_boundary_options():
    mesh = square(2, sides=("x0",), bary=True)
    beta, info = infsup_constant(mesh, 1, zero_on="neumann", return_details=True)
    assert beta > 0 and not info["mean_removed"]
    _, info = infsup_constant(mesh, 1, zero_on="all", return_details=True)
    assert info["mean_removed"]
    with pytest.raises(ValueError, match="singular H"):
        infsup_constant(square(2), 1, zero_on="neumann")
    with pytest.raises(ValueError, match="unknown"):
        infsup_constant(mesh, 1, zero_on="top")


def test_locking_free_sequence():
    """First omegas at nu = 0.49, 0.4999, 0.5 - 1e-13 on a fixed mesh form a Cauchy-like sequence."""
    base = Problem(n=2, barycentric=True, k=2, dirichlet=("all",), penalty=PenaltyConfig("k_squared", 8.0))
    om = [base.replace(materials=homogeneous(nu=nu)).solve(nev=3).omegas[:3] for nu in (0.49, 0.4999, 0.5 - 1e-13)]
    d1, d2 = np.abs(om[1] - om[0]), np.abs(om[2] - om[1])
    assert np.all(d2 < d1)
    assert np.all(np.isfinite(om[2])) and om[2].min() > 1.0


def test_match_nearest_handles_split_double_eigenvalue():
    targets = [17.5821050, 17.5821064, 19.1158905]
    values = [19.1646777, 17.5854948, 17.5855120]
    out, conflict = match_nearest(targets, values)
    assert_allclose(out, [17.5854948, 17.5855120, 19.1646777])
    assert not conflict.any()
