"""Assembly of the A-weighted mass form and the symmetric interior-penalty form.

The penalty-free pieces of ``c_h`` are assembled as separately weighted parts so the
same loops also serve the DG norms:

* ``div``:         (rho^{-1} div_h s, div_h t)
* ``jump``:        sum_F (rho_F h_F)^{-1} ([[s]], [[t]])_F
* ``consistency``: -({rho^{-1} div_h s}, [[t]]) - ({rho^{-1} div_h t}, [[s]])
* ``average``:     sum_F rho_F h_F ({rho^{-1} div_h s}, {rho^{-1} div_h t})_F

``c_h = div + a * jump + consistency``. Every block is built symmetric
(``(Y + Y^T)/2`` on diagonal blocks, exact transposes off the diagonal).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from .fem import DGSpace, make_quadrature, scalar_basis
from .material import IsotropicMaterial, facet_density
from .mesh import DIRICHLET, INTERIOR, Mesh, _simplex_measure

log = logging.getLogger(__name__)

PARTS = ("div", "jump", "consistency", "average")
PENALTY_RULES = ("fixed", "k_squared", "computed")
FACET_SIZES = ("height", "diameter")
NEUMANN_AVERAGES = {"one_sided": 1.0, "halved": 0.5}


def facet_sizes(mesh: Mesh, rule: str = "height") -> np.ndarray:
    """Facet length scale ``h_F`` entering the penalty and the DG norms.

    ``diameter`` is the facet diameter. ``height`` is the smallest distance from the facet
    to an opposite vertex of an adjacent cell; it matches the element-size scaling used by
    common DG codes and is the more robust choice on barycentric (Alfeld) meshes. Both
    satisfy ``h_F <= h_K`` for the adjacent cells, so the trace-constant bound on the
    penalty stays valid.
    """
    if rule == "diameter":
        return mesh.facet_diameters.copy()
    if rule == "height":
        return mesh.facet_heights()
    raise ValueError(f"unknown facet size rule {rule!r}")


@dataclass(frozen=True)
class PenaltyConfig:
    """How the penalty ``a`` is chosen.

    ``fixed``: ``a = a0``; ``k_squared``: ``a = a0 k^2``; ``computed``:
    ``a = computed_margin * (2 C_tr^2 + 1/2)`` with the mesh trace constant.

    ``facet_size`` selects ``h_F`` (see :func:`facet_sizes`). ``neumann_average`` sets the
    average on Neumann facets: ``one_sided`` is ``{v} = v_K`` (consistent);
    ``halved`` uses ``{v} = v_K / 2``, the convention obtained when the two-sided average
    is reused on boundary facets with a zero outer trace. It is kept only to reproduce
    published reference tables and is not consistent.
    """

    rule: str = "k_squared"
    a0: float = 8.0
    computed_margin: float = 1.0
    facet_size: str = "height"
    neumann_average: str = "one_sided"

    def __post_init__(self):
        if self.neumann_average not in NEUMANN_AVERAGES:
            raise ValueError(f"unknown Neumann average convention {self.neumann_average!r}")
        if self.facet_size not in FACET_SIZES:
            raise ValueError(f"unknown facet size rule {self.facet_size!r}")
        if self.rule not in PENALTY_RULES:
            raise ValueError(f"unknown penalty rule {self.rule!r}")
        if self.rule != "computed" and self.a0 <= 0:
            raise ValueError("penalty a0 must be positive")
        if self.rule == "computed" and self.computed_margin < 1:
            raise ValueError("computed_margin must be >= 1")

    def resolve(self, mesh: Mesh, k: int) -> float:
        if self.rule == "fixed":
            return float(self.a0)
        if self.rule == "k_squared":
            return float(self.a0 * k * k)
        return self.computed_margin * penalty_lower_bound(trace_constant(mesh, k))


def penalty_lower_bound(c_tr: float) -> float:
    """Smallest penalty for which coercivity is certified: ``2 C_tr^2 + 1/2``."""
    return 2.0 * c_tr * c_tr + 0.5


def _reference_face_points(dim: int, face: int, xi_face: np.ndarray) -> np.ndarray:
    """Map facet-reference points onto the reference cell face opposite vertex ``face``."""
    ref = np.vstack([np.zeros(dim), np.eye(dim)])
    verts = np.delete(ref, face, axis=0)
    bary = np.column_stack([1.0 - xi_face.sum(axis=1), xi_face])
    return bary @ verts


def trace_constant(mesh: Mesh, k: int) -> float:
    """Sharpest ``C`` with ``h_K^{1/2} |phi|_{dK} <= C |phi|_K`` for all ``phi`` in P_k(K).

    Per cell this is ``sqrt(lambda_max(h_K B_dK, B_K))`` for the boundary and volume Gram
    matrices; the modes are L2(K)-orthonormal so ``B_K`` is the identity.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    d = mesh.dim
    basis = scalar_basis(d, k)
    quad = make_quadrature(d - 1, 2 * k)
    fref = math.factorial(d - 1)
    B = np.zeros((mesh.n_cells, basis.size, basis.size))
    X = mesh.vertices[mesh.cells]
    E = X[:, 1:, :] - X[:, :1, :]
    det = np.abs(np.linalg.det(E))
    if np.any(det <= 0):
        raise ValueError("singular volume Gram matrix: degenerate cell")
    for face in range(d + 1):
        pts = _reference_face_points(d, face, quad.xi)
        phi = basis.values(pts)
        R = phi.T @ (quad.weights[:, None] * phi)
        fv = np.delete(X, face, axis=1)
        area = _simplex_measure(fv)
        B += (area * fref / det)[:, None, None] * R
    lam = np.linalg.eigvalsh(B)[:, -1]
    return float(np.sqrt(np.max(mesh.cell_diameters * lam)))


# -- block sparse helpers -------------------------------------------------------


def _bsr(diag: np.ndarray, pairs: np.ndarray, off: np.ndarray) -> sp.bsr_matrix:
    """Symmetric BSR matrix from diagonal blocks and upper off-diagonal blocks.

    ``off[f]`` couples ``pairs[f, 0]`` (rows) to ``pairs[f, 1]`` (cols); its transpose is
    placed at the mirrored position.
    """
    nc, n, _ = diag.shape
    rows = np.concatenate([np.arange(nc), pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([np.arange(nc), pairs[:, 1], pairs[:, 0]])
    order = np.lexsort((cols, rows))
    data = np.concatenate([diag, off, np.transpose(off, (0, 2, 1))])[order]
    indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=nc))])
    return sp.bsr_matrix((data, cols[order], indptr), shape=(nc * n, nc * n))


def _sym(Y: np.ndarray) -> np.ndarray:
    return 0.5 * (Y + np.transpose(Y, (0, 2, 1)))


class _FacetData:
    """Per-facet weights cached for assembly and norms."""

    def __init__(self, space: DGSpace, material: IsotropicMaterial, facet_size: str):
        mesh = space.mesh
        self.facets = mesh.dg_facets
        self.rho_cell = material.cell_density(mesh)
        self.rho_F = facet_density(mesh, material)
        self.h_F = facet_sizes(mesh, facet_size)


def _cell_div_blocks(space: DGSpace, rho_cell: np.ndarray) -> np.ndarray:
    d, k = space.dim, space.degree
    basis = space.basis
    quad = make_quadrature(d, max(2 * (k - 1), 0))
    G = basis.gradients(quad.xi)  # (q, s, d)
    Gref = np.einsum("q,qir,qjs->ijrs", quad.weights, G, G)
    Jinv = space.geometry.jac_inv
    Gc = np.einsum("crp,ijrs,csq->cijpq", Jinv, Gref, Jinv)
    E = space.sym_basis
    S = np.einsum("amp,bmq->abpq", E, E)
    V = np.einsum("abpq,cijpq->ciajb", S, Gc) / rho_cell[:, None, None, None, None]
    n = space.dofs_per_cell
    return _sym(V.reshape(-1, n, n))


def _side_arrays(space, cells, x, normals, avg_weight, rho):
    """Jump and averaged-divergence traces of every local basis function on one side.

    Returns ``J`` and ``D`` of shape (nf, nq, ndof, d).
    """
    phi = space.scalar_values(cells, x)  # (f, q, s)
    grad = space.scalar_gradients(cells, x)  # (f, q, s, d)
    E = space.sym_basis
    En = np.einsum("bmj,fj->fbm", E, normals)
    J = phi[:, :, :, None, None] * En[:, None, None, :, :]
    D = np.einsum("bmj,fqsj->fqsbm", E, grad) * (avg_weight / rho)[:, None, None, None, None]
    nf, nq = phi.shape[:2]
    n = space.dofs_per_cell
    return J.reshape(nf, nq, n, space.dim), D.reshape(nf, nq, n, space.dim)


def _gram(Wq, A, B):
    # sum_q W[f, q] A[f, q, r, m] B[f, q, c, m] -> (f, r, c)
    nf, nq, n, d = A.shape
    Aw = (A * Wq[:, :, None, None]).transpose(0, 2, 1, 3).reshape(nf, n, nq * d)
    Bm = B.transpose(0, 2, 1, 3).reshape(nf, n, nq * d)
    return Aw @ Bm.transpose(0, 2, 1)


def assemble_parts(
    space: DGSpace,
    material: IsotropicMaterial,
    weights: Mapping[str, float],
    facet_size: str = "height",
    neumann_average: str = "one_sided",
    chunk: int = 2000,
) -> sp.bsr_matrix:
    """Assemble ``sum_name weights[name] * part[name]`` as one symmetric BSR matrix."""
    for name in weights:
        if name not in PARTS:
            raise ValueError(f"unknown form part {name!r}")
    mesh = space.mesh
    d, k = space.dim, space.degree
    n = space.dofs_per_cell
    fd = _FacetData(space, material, facet_size)
    w_div = weights.get("div", 0.0)
    w_jump = weights.get("jump", 0.0)
    w_cons = weights.get("consistency", 0.0)
    w_avg = weights.get("average", 0.0)

    diag = np.zeros((mesh.n_cells, n, n))
    if w_div:
        diag += w_div * _cell_div_blocks(space, fd.rho_cell)

    facets = fd.facets
    if np.any(mesh.facet_kind[facets] == DIRICHLET):
        raise RuntimeError("inconsistent facet enumeration: dirichlet facet in the DG facet set")
    interior = facets[mesh.facet_kind[facets] == INTERIOR]
    pairs = mesh.facet_cells[interior]
    off = np.zeros((len(interior), n, n))
    off_pos = np.full(mesh.n_facets, -1)
    off_pos[interior] = np.arange(len(interior))

    quad = make_quadrature(d - 1, 2 * k)
    fref = math.factorial(d - 1)
    bary = quad.points  # (q, d) over the d facet vertices

    if any((w_jump, w_cons, w_avg)):
        for start in range(0, len(facets), chunk):
            F = facets[start : start + chunk]
            inner = mesh.facet_kind[F] == INTERIOR
            P = mesh.vertices[mesh.facet_vertices[F]]
            x = np.einsum("qv,fvd->fqd", bary, P)
            W = quad.weights[None, :] * (mesh.facet_areas[F] * fref)[:, None]
            c0 = mesh.facet_cells[F, 0]
            nrm = mesh.facet_normals[F]
            half = np.where(inner, 0.5, NEUMANN_AVERAGES[neumann_average])
            J0, D0 = _side_arrays(space, c0, x, nrm, half, fd.rho_cell[c0])
            pen = 1.0 / (fd.rho_F[F] * fd.h_F[F])
            avgw = fd.rho_F[F] * fd.h_F[F]

            def block(W, pen, avgw, Ja, Da, Jb, Db, same):
                B = np.zeros((len(Ja), n, n))
                if w_jump:
                    Y = _gram(W * pen[:, None], Ja, Jb)
                    B += w_jump * (_sym(Y) if same else Y)
                if w_avg:
                    Y = _gram(W * avgw[:, None], Da, Db)
                    B += w_avg * (_sym(Y) if same else Y)
                if w_cons:
                    if same:
                        X = _gram(W, Ja, Da)
                        B -= w_cons * (X + np.transpose(X, (0, 2, 1)))
                    else:
                        X = _gram(W, Ja, Db) + np.transpose(_gram(W, Jb, Da), (0, 2, 1))
                        B -= w_cons * X
                return B

            B00 = block(W, pen, avgw, J0, D0, J0, D0, True)
            lf0 = mesh.facet_local[F, 0]
            for lf in range(d + 1):
                sel = lf0 == lf
                diag[c0[sel]] += B00[sel]

            if np.any(inner):
                Fi = F[inner]
                c1 = mesh.facet_cells[Fi, 1]
                xi = x[inner]
                J1, D1 = _side_arrays(space, c1, xi, -nrm[inner], half[inner], fd.rho_cell[c1])
                wts = (W[inner], pen[inner], avgw[inner])
                B11 = block(*wts, J1, D1, J1, D1, True)
                B01 = block(*wts, J0[inner], D0[inner], J1, D1, False)
                lf1 = mesh.facet_local[Fi, 1]
                for lf in range(d + 1):
                    sel = lf1 == lf
                    diag[c1[sel]] += B11[sel]
                off[off_pos[Fi]] = B01
    return _bsr(diag, pairs, off)


# -- forms ---------------------------------------------------------------------------


def mass_blocks(space: DGSpace, material: IsotropicMaterial) -> np.ndarray:
    """Per-cell mass blocks ``kron(I_modes, A_K)`` (orthonormal scalar modes)."""
    mesh = space.mesh
    eye = np.eye(space.scalar_dim)
    per_sub = {
        sid: np.kron(eye, material.compliance_matrix(sid, space.sym_basis))
        for sid in np.unique(mesh.cell_subdomain)
    }
    return np.stack([per_sub[s] for s in mesh.cell_subdomain])


def assemble_mass(space: DGSpace, material: IsotropicMaterial) -> sp.bsr_matrix:
    """Block-diagonal matrix of ``(A sigma, tau)``."""
    blocks = mass_blocks(space, material)
    nc, n, _ = blocks.shape
    return sp.bsr_matrix((blocks, np.arange(nc), np.arange(nc + 1)), shape=(nc * n, nc * n))


def _resolve(space: DGSpace, penalty) -> tuple[float, dict]:
    if isinstance(penalty, PenaltyConfig):
        rules = {"facet_size": penalty.facet_size, "neumann_average": penalty.neumann_average}
        return penalty.resolve(space.mesh, space.degree), rules
    return float(penalty), {"facet_size": "height", "neumann_average": "one_sided"}


def assemble_c_h(space: DGSpace, material: IsotropicMaterial, penalty: PenaltyConfig | float) -> sp.bsr_matrix:
    """Matrix of ``c_h``; a bare number is taken as the resolved penalty ``a``."""
    a, rules = _resolve(space, penalty)
    return assemble_parts(space, material, {"div": 1.0, "jump": a, "consistency": 1.0}, **rules)


@dataclass
class AssembledForms:
    """Stiffness (``a_h``) and block-diagonal mass (``(., .)_A``) on a DG space."""

    space: DGSpace
    material: IsotropicMaterial
    stiffness: sp.spmatrix
    mass: sp.spmatrix
    mass_blocks: np.ndarray
    penalty_used: float
    rho_F: np.ndarray
    h_F: np.ndarray
    facet_size: str = "height"
    neumann_average: str = "one_sided"
    _parts: dict = field(default_factory=dict, repr=False)

    @property
    def c_matrix(self) -> sp.spmatrix:
        if "c" not in self._parts:
            self._parts["c"] = (self.stiffness - self.mass).tocsr()
        return self._parts["c"]

    def part(self, name: str) -> sp.spmatrix:
        """Individual form part (assembled on demand and cached)."""
        if name == "mass":
            return self.mass
        if name not in self._parts:
            self._parts[name] = assemble_parts(
                self.space, self.material, {name: 1.0}, self.facet_size, self.neumann_average
            ).tocsr()
        return self._parts[name]

    @property
    def total_dofs(self) -> int:
        return self.space.total_dofs

    def export_matrix_market(self, stiffness_path, mass_path) -> None:
        from scipy.io import mmwrite

        mmwrite(str(stiffness_path), self.stiffness.tocoo(), symmetry="symmetric")
        mmwrite(str(mass_path), self.mass.tocoo(), symmetry="symmetric")


def assemble_a_h(space: DGSpace, material: IsotropicMaterial, penalty: PenaltyConfig | float) -> AssembledForms:
    """Stiffness ``(A s, t) + c_h(s, t)`` together with the mass matrix."""
    a, rules = _resolve(space, penalty)
    if a <= 0:
        raise ValueError("resolved penalty must be positive")
    blocks = mass_blocks(space, material)
    C = assemble_parts(space, material, {"div": 1.0, "jump": a, "consistency": 1.0}, **rules)
    nc = space.mesh.n_cells
    C.data[_diag_block_positions(C)] += blocks
    mass = sp.bsr_matrix((blocks, np.arange(nc), np.arange(nc + 1)), shape=C.shape)
    fd = _FacetData(space, material, rules["facet_size"])
    log.info("assembled a_h: %d dofs, penalty %.6g, nnz %d", space.total_dofs, a, C.nnz)
    return AssembledForms(space, material, C, mass, blocks, float(a), fd.rho_F, fd.h_F, **rules)


def _diag_block_positions(A: sp.bsr_matrix) -> np.ndarray:
    nb = A.indptr.size - 1
    rows = np.repeat(np.arange(nb), np.diff(A.indptr))
    pos = np.nonzero(rows == A.indices)[0]
    assert len(pos) == nb
    return pos


def dg_norm(x: np.ndarray, forms: AssembledForms, star: bool = False) -> float:
    """``|||x|||`` (or the starred norm with the facet-average term)."""
    names = ["mass", "div", "jump"] + (["average"] if star else [])
    total = sum(float(x @ (forms.part(n) @ x)) for n in names)
    return math.sqrt(max(total, 0.0))
