import csv

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import square
from stressdg.assembly import PenaltyConfig, assemble_a_h
from stressdg.eigen import (
    EigenSolveError,
    ShiftedSystem,
    _upper_csr,
    constant_trace_mode,
    filter_spectrum,
    pardiso_available,
    solve,
    solve_dense,
    solve_dense_matrices,
    solve_shift_invert,
)
from stressdg.fem import DGSpace
from stressdg.material import IsotropicMaterial
from stressdg.mesh import perturb_interior

BACKENDS = ["superlu"] + (["pardiso"] if pardiso_available() else [])


def naive_generalized_eigvals(A, M):
    """Independent oracle: explicit M^{-1/2} A M^{-1/2} with numpy only."""
    w, V = np.linalg.eigh(M)
    S = V @ np.diag(w**-0.5) @ V.T
    return np.sort(np.linalg.eigvalsh(S @ A @ S))


def forms_for(n=2, k=1, sides=("y0",), bary=True, a0=8.0, seed=1, nu=0.35):
    mesh = perturb_interior(square(n, sides, bary=bary), 0.03, seed=seed)
    mat = IsotropicMaterial.homogeneous(2, 1.0, 1.0, nu)
    return assemble_a_h(DGSpace(mesh, k), mat, PenaltyConfig("k_squared", a0))


def test_solve_dense_matrices_trivial():
    w, X = solve_dense_matrices(np.array([[2.0]]), np.array([[1.0]]))
    assert_allclose(w, [2.0])
    assert_allclose(X, [[1.0]])


def test_filter_spectrum():
    out = filter_spectrum([0.5, 1.0, 1.0 + 1e-9, 2.0, 5.0], cluster_tol=1e-6)
    assert out.kernel_count == 2
    assert_allclose(out.essential, [2.0, 5.0])
    assert_allclose(out.omegas, [1.0, 2.0])
    assert_allclose(out.violations, [0.5])
    with pytest.raises(ValueError, match="sorted"):
        filter_spectrum([2.0, 1.0])


def test_dense_matches_naive_oracle():
    forms = forms_for(n=1, k=1)
    assert forms.total_dofs <= 200
    res = solve_dense(forms, keep_all=True)
    ref = naive_generalized_eigvals(forms.stiffness.toarray(), forms.mass.toarray())
    assert_allclose(res.kappas, ref, rtol=1e-10, atol=1e-10)
    assert res.kappas.min() >= 1 - 1e-8


def test_dense_result_properties():
    forms = forms_for(n=2, k=1)
    res = solve_dense(forms, nev=5)
    assert len(res.omegas) == 5
    X = res.vectors
    assert_allclose(X.T @ (forms.mass @ X), np.eye(X.shape[1]), atol=1e-10)
    assert res.residuals.max() < 1e-10
    assert res.kernel_count == int(res.is_kernel.sum())
    C = forms.c_matrix
    for x in res.kernel_vectors.T:
        assert x @ (C @ x) <= 1e-9 * (x @ (forms.mass @ x))


@pytest.mark.parametrize("backend", BACKENDS)
def test_shift_invert_matches_dense(backend):
    forms = forms_for(n=2, k=2)
    ref = solve_dense(forms, nev=6)
    res = solve_shift_invert(forms, nev=6, backend=backend, count_kernel=True)
    assert_allclose(res.omegas, ref.omegas[:6], rtol=1e-10)
    assert res.residuals.max() < 1e-9
    if backend == "pardiso":
        assert res.kernel_count == ref.kernel_count
    else:
        assert res.kernel_count is None


def test_shift_invert_nearest_mode_and_validation():
    forms = forms_for(n=2, k=1)
    ref = solve_dense(forms, keep_all=True)
    target = 12.0
    res = solve_shift_invert(forms, shift=target, nev=3, mode="nearest")
    expected = np.sort(ref.kappas[np.argsort(np.abs(ref.kappas - target))[:3]])
    assert_allclose(res.kappas, expected, rtol=1e-10)
    assert_allclose(res.by_distance()[0], expected[np.argmin(np.abs(expected - target))])
    with pytest.raises(ValueError, match="nev"):
        solve_shift_invert(forms, nev=0)
    with pytest.raises(ValueError, match="mode"):
        solve_shift_invert(forms, mode="sideways")


def test_release_stiffness_gives_same_answer():
    f1, f2 = forms_for(n=2, k=1), forms_for(n=2, k=1)
    r1 = solve_shift_invert(f1, nev=4)
    r2 = solve_shift_invert(f2, nev=4, release_stiffness=True)
    assert f2.stiffness is None
    assert_allclose(r1.kappas, r2.kappas, rtol=1e-12)


def test_shifted_system_products_and_shift_moves():
    forms = forms_for(n=2, k=1)
    A, M = forms.stiffness, forms.mass
    sys_ = ShiftedSystem(A, M, forms.mass_blocks, 1.5)
    x = np.random.default_rng(0).standard_normal(A.shape[0])
    assert_allclose(sys_.matvec(x), A @ x - 1.5 * (M @ x), atol=1e-12)
    sys_.set_shift(-0.25)
    assert_allclose(sys_.apply_stiffness(x), A @ x, atol=1e-12)
    assert_allclose(sys_.full_csc().toarray(), (A - (-0.25) * M).toarray(), atol=1e-12)
    K = _upper_csr(A).toarray()
    assert_allclose(K, np.triu(A.toarray()))


def test_dense_cap_and_dispatch():
    forms = forms_for(n=2, k=1)
    with pytest.raises(EigenSolveError, match="dense cap"):
        solve_dense(forms, dense_cap=10)
    res = solve(forms, nev=3, dense_cap=10)
    assert res.method.startswith("shift-invert")
    assert_allclose(res.omegas, solve(forms, nev=3).omegas[:3], rtol=1e-10)


def test_spectrum_csv(tmp_path):
    forms = forms_for(n=1, k=1)
    res = solve_dense(forms, nev=3)
    path = tmp_path / "s.csv"
    res.write_csv(path, "tool x\nseed 1")
    lines = path.read_text().splitlines()
    assert lines[:2] == ["# tool x", "# seed 1"]
    rows = list(csv.DictReader(lines[2:]))
    assert list(rows[0]) == ["index", "kappa", "omega", "is_kernel", "residual"]
    ess = [r for r in rows if r["omega"]]
    assert_allclose([float(r["omega"]) for r in ess], res.omegas, rtol=1e-11)
    assert sum(int(r["is_kernel"]) for r in rows) == res.kernel_count


def test_kernel_count_independent_of_penalty():
    counts = {solve_dense(forms_for(n=2, k=1, a0=a0), nev=1).kernel_count for a0 in (4.0, 8.0, 16.0)}
    assert len(counts) == 1


NEAR_INCOMPRESSIBLE = 0.5 - 1e-13


def test_constant_trace_mode_detection():
    assert constant_trace_mode(forms_for(sides=("all",))) is None
    assert constant_trace_mode(forms_for(sides=("y0",), nu=NEAR_INCOMPRESSIBLE)) is None
    forms = forms_for(sides=("all",), nu=NEAR_INCOMPRESSIBLE)
    v = constant_trace_mode(forms)
    assert v is not None
    # sigma = I has no jumps and no divergence: an exact kernel vector
    C = forms.c_matrix
    assert np.linalg.norm(C @ v) <= 1e-12 * abs(C).max() * np.linalg.norm(v)


def test_bordered_system_products():
    forms = forms_for(n=2, k=1, sides=("all",))
    A, M = forms.stiffness, forms.mass
    n = A.shape[0]
    g = np.random.default_rng(3).standard_normal(n)
    g[::5] = 0.0
    sys_ = ShiftedSystem(A, M, forms.mass_blocks, 1.25, border=g)
    full = np.zeros((n + 1, n + 1))
    full[:n, :n] = (A - 1.25 * M).toarray()
    full[:n, n] = full[n, :n] = g
    assert_allclose(sys_.full_csc().toarray(), full, atol=1e-12)
    x = np.random.default_rng(4).standard_normal(n)
    assert_allclose(sys_.apply_stiffness(x), A @ x, atol=1e-12)
    sys_.set_shift(0.5)
    full[:n, :n] = (A - 0.5 * M).toarray()
    assert_allclose(sys_.full_csc().toarray(), full, atol=1e-12)


def test_deflation_agrees_with_plain_solve_when_both_are_accurate(monkeypatch):
    # at nu = 0.5 - 1e-7 the compliance ratio exceeds the deflation threshold while the
    # undeflated pencil is still well enough conditioned to serve as the comparison
    forms = forms_for(n=2, k=1, sides=("all",), nu=0.5 - 1e-7)
    deflated = solve_dense(forms, nev=6)
    monkeypatch.setattr("stressdg.eigen.constant_trace_mode.__defaults__", (np.inf,))
    plain = solve_dense(forms, nev=6)
    assert_allclose(deflated.omegas, plain.omegas[:6], rtol=1e-6)
    assert deflated.kernel_count == plain.kernel_count


@pytest.mark.parametrize("backend", BACKENDS)
def test_near_incompressible_dense_and_shift_invert_agree(backend):
    forms = forms_for(n=2, k=2, sides=("all",), nu=NEAR_INCOMPRESSIBLE)
    ref = solve_dense(forms, nev=6)
    # locking-free: essentially the nu = 0.5 - 1e-9 spectrum, with no spurious low mode
    softer = solve_dense(forms_for(n=2, k=2, sides=("all",), nu=0.5 - 1e-9), nev=6)
    assert_allclose(ref.omegas[:6], softer.omegas[:6], rtol=1e-6)
    res = solve_shift_invert(forms, nev=6, backend=backend, count_kernel=True)
    assert_allclose(res.omegas, ref.omegas[:6], rtol=1e-8)
    assert res.residuals[res.essential_mask].max() < 1e-8
    assert np.sum(res.is_kernel) == 1
    if backend == "pardiso":
        assert res.kernel_count == ref.kernel_count
