"""Simplex quadrature, orthonormal scalar modes and the symmetric-tensor DG space.

The reference simplex is ``{x >= 0, sum(x) <= 1}`` with vertices ``0, e_1, ..., e_d``.
Cell ``K`` is the image of the affine map ``x = v_0 + J xhat``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations_with_replacement

import numpy as np
from scipy.special import roots_jacobi

from .mesh import Mesh


@dataclass(frozen=True)
class SimplexQuadrature:
    """Quadrature rule on the reference ``dim``-simplex.

    ``points`` holds barycentric coordinates ``(lambda_0, ..., lambda_d)``; ``xi`` holds
    the matching reference Cartesian coordinates (``lambda_1 .. lambda_d``).
    """

    dim: int
    points: np.ndarray
    weights: np.ndarray
    exact_degree: int

    @property
    def xi(self) -> np.ndarray:
        return self.points[:, 1:]

    @property
    def num_points(self) -> int:
        return len(self.weights)


def reference_measure(dim: int) -> float:
    return 1.0 / math.factorial(dim)


def _gauss_jacobi01(n: int, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Jacobi rule on [0, 1] for the weight (1 - t)^alpha."""
    x, w = roots_jacobi(n, alpha, 0.0)
    return (x + 1.0) / 2.0, w / 2.0 ** (alpha + 1.0)


def _collapsed_rule(dim: int, degree: int) -> tuple[np.ndarray, np.ndarray]:
    # Duffy map: Gauss-Jacobi in the collapsed directions absorbs the Jacobian.
    n = max(1, (degree + 2) // 2)
    if dim == 1:
        t, w = _gauss_jacobi01(n, 0.0)
        return t[:, None], w
    if dim == 2:
        s, ws = _gauss_jacobi01(n, 0.0)
        t, wt = _gauss_jacobi01(n, 1.0)
        S, T = np.meshgrid(s, t, indexing="ij")
        x = np.column_stack([(S * (1 - T)).ravel(), T.ravel()])
        return x, np.outer(ws, wt).ravel()
    if dim == 3:
        s, ws = _gauss_jacobi01(n, 0.0)
        t, wt = _gauss_jacobi01(n, 1.0)
        u, wu = _gauss_jacobi01(n, 2.0)
        S, T, U = np.meshgrid(s, t, u, indexing="ij")
        x = np.column_stack(
            [(S * (1 - T) * (1 - U)).ravel(), (T * (1 - U)).ravel(), U.ravel()]
        )
        w = (ws[:, None, None] * wt[None, :, None] * wu[None, None, :]).ravel()
        return x, w
    raise ValueError(f"unsupported simplex dimension {dim}")


def _table_rule(dim: int, degree: int):
    if degree <= 1:
        return np.full((1, dim), 1.0 / (dim + 1)), np.array([reference_measure(dim)]), 1
    if degree == 2 and dim == 2:
        x = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
        return x, np.full(3, 1 / 6), 2
    if degree == 2 and dim == 3:
        a, b = 0.1381966011250105, 0.5854101966249685
        x = np.array([[a, a, a], [b, a, a], [a, b, a], [a, a, b]])
        return x, np.full(4, 1 / 24), 2
    return None


@lru_cache(maxsize=None)
def make_quadrature(dim: int, degree: int) -> SimplexQuadrature:
    """Rule on the reference ``dim``-simplex exact for polynomials of total degree ``degree``.

    Low degrees use small symmetric rules; anything else falls back to a collapsed
    (conical) Gauss-Jacobi product rule, which exists for every degree.
    """
    if degree < 0:
        raise ValueError("quadrature degree must be >= 0")
    if dim < 1 or dim > 3:
        raise ValueError(f"unsupported simplex dimension {dim}")
    table = _table_rule(dim, degree) if dim > 1 else None
    if table is not None:
        x, w, exact = table
    else:
        x, w = _collapsed_rule(dim, degree)
        exact = 2 * max(1, (degree + 2) // 2) - 1
    bary = np.column_stack([1.0 - x.sum(axis=1), x])
    points = np.ascontiguousarray(bary)
    weights = np.ascontiguousarray(w)
    points.setflags(write=False)
    weights.setflags(write=False)
    return SimplexQuadrature(dim, points, weights, max(exact, degree))


def monomial_exponents(dim: int, degree: int) -> np.ndarray:
    """Exponent tuples of all monomials of total degree <= ``degree``, graded order."""
    exps = []
    for total in range(degree + 1):
        for combo in combinations_with_replacement(range(dim), total):
            e = [0] * dim
            for c in combo:
                e[c] += 1
            exps.append(e)
    return np.array(exps, dtype=int).reshape(-1, dim)


def _monomials(x: np.ndarray, exps: np.ndarray) -> np.ndarray:
    # x: (..., d) -> (..., m)
    return np.prod(x[..., None, :] ** exps, axis=-1)


def _monomial_gradients(x: np.ndarray, exps: np.ndarray) -> np.ndarray:
    # (..., m, d)
    out = np.empty(x.shape[:-1] + exps.shape)
    for r in range(exps.shape[1]):
        e = exps.copy()
        coef = e[:, r].astype(float)
        e[:, r] = np.maximum(e[:, r] - 1, 0)
        out[..., r] = coef * _monomials(x, e)
    return out


class ScalarBasis:
    """L2-orthonormal basis of P_k on the reference simplex.

    Built by Gram-Schmidt (two Cholesky passes) on monomials centred at the
    barycentre, so the first ``dim P_m`` modes span ``P_m`` for every ``m <= k``.
    """

    def __init__(self, dim: int, degree: int):
        if degree < 0:
            raise ValueError("polynomial degree must be >= 0")
        self.dim = dim
        self.degree = degree
        self.exponents = monomial_exponents(dim, degree)
        self.size = len(self.exponents)
        self.center = np.full(dim, 1.0 / (dim + 1))
        quad = make_quadrature(dim, 2 * degree)
        V = _monomials(quad.xi - self.center, self.exponents)
        coeffs = np.eye(self.size)
        for _ in range(2):
            W = V @ coeffs
            gram = W.T @ (quad.weights[:, None] * W)
            L = np.linalg.cholesky(gram)
            coeffs = coeffs @ np.linalg.inv(L).T
        self.coeffs = coeffs

    def dim_of_degree(self, m: int) -> int:
        return math.comb(m + self.dim, self.dim)

    def values(self, xi: np.ndarray) -> np.ndarray:
        """Mode values at reference points ``xi`` (..., d) -> (..., size)."""
        return _monomials(np.asarray(xi) - self.center, self.exponents) @ self.coeffs

    def gradients(self, xi: np.ndarray) -> np.ndarray:
        """Reference gradients (..., size, d)."""
        G = _monomial_gradients(np.asarray(xi) - self.center, self.exponents)
        return np.einsum("...md,ms->...sd", G, self.coeffs)


@lru_cache(maxsize=None)
def scalar_basis(dim: int, degree: int) -> ScalarBasis:
    return ScalarBasis(dim, degree)


def symmetric_basis(dim: int) -> np.ndarray:
    """Frobenius-orthonormal basis of symmetric d x d matrices.

    Order: diagonal entries ``E_ii`` first, then ``(E_ij + E_ji)/sqrt(2)`` for ``i < j``.
    """
    mats = []
    for i in range(dim):
        E = np.zeros((dim, dim))
        E[i, i] = 1.0
        mats.append(E)
    for i in range(dim):
        for j in range(i + 1, dim):
            E = np.zeros((dim, dim))
            E[i, j] = E[j, i] = 1.0 / math.sqrt(2.0)
            mats.append(E)
    return np.array(mats)


@dataclass(frozen=True)
class CellGeometry:
    """Affine data per cell: origin vertex, Jacobian, inverse and determinant."""

    origin: np.ndarray
    jac: np.ndarray
    jac_inv: np.ndarray
    det: np.ndarray

    @classmethod
    def from_mesh(cls, mesh: Mesh) -> "CellGeometry":
        X = mesh.vertices[mesh.cells]
        origin = X[:, 0, :]
        jac = np.transpose(X[:, 1:, :] - origin[:, None, :], (0, 2, 1))
        det = np.linalg.det(jac)
        return cls(origin, jac, np.linalg.inv(jac), det)

    def to_reference(self, cells: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Map physical points ``x`` (n, ..., d) into the reference frames of ``cells`` (n,)."""
        shift = x - self.origin[cells].reshape((len(cells),) + (1,) * (x.ndim - 2) + (-1,))
        return np.einsum("cij,c...j->c...i", self.jac_inv[cells], shift)

    def to_physical(self, cells: np.ndarray, xi: np.ndarray) -> np.ndarray:
        return self.origin[cells][:, None, :] + np.einsum("cij,qj->cqi", self.jac[cells], xi)


@dataclass
class DGSpace:
    """Fully discontinuous piecewise P_k symmetric tensor fields.

    Global DOF ``cell * dofs_per_cell + mode * sym_dim + component``; scalar modes are
    the reference orthonormal modes divided by ``sqrt(det J)``, hence L2(K)-orthonormal.
    """

    mesh: Mesh
    degree: int
    basis: ScalarBasis = field(init=False, repr=False)
    geometry: CellGeometry = field(init=False, repr=False)
    sym_basis: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("DG stress space requires degree k >= 1")
        self.basis = scalar_basis(self.mesh.dim, self.degree)
        self.geometry = CellGeometry.from_mesh(self.mesh)
        self.sym_basis = symmetric_basis(self.mesh.dim)

    @property
    def dim(self) -> int:
        return self.mesh.dim

    @property
    def scalar_dim(self) -> int:
        return self.basis.size

    @property
    def sym_dim(self) -> int:
        return self.dim * (self.dim + 1) // 2

    @property
    def dofs_per_cell(self) -> int:
        return self.scalar_dim * self.sym_dim

    @property
    def total_dofs(self) -> int:
        return self.mesh.n_cells * self.dofs_per_cell

    def cell_dofs(self, cell: int) -> np.ndarray:
        n = self.dofs_per_cell
        return np.arange(cell * n, (cell + 1) * n)

    def scalar_values(self, cells: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Physical scalar modes of ``cells`` (n,) at physical points ``x`` (n, q, d) -> (n, q, s)."""
        xi = self.geometry.to_reference(cells, x)
        scale = 1.0 / np.sqrt(np.abs(self.geometry.det[cells]))
        return self.basis.values(xi) * scale[:, None, None]

    def scalar_gradients(self, cells: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Physical gradients (n, q, s, d)."""
        xi = self.geometry.to_reference(cells, x)
        scale = 1.0 / np.sqrt(np.abs(self.geometry.det[cells]))
        G = self.basis.gradients(xi)
        return np.einsum("crp,cqsr->cqsp", self.geometry.jac_inv[cells], G) * scale[:, None, None, None]

    def eval_basis(self, cell: int, points: np.ndarray) -> np.ndarray:
        """Tensor basis values at physical ``points`` (q, d) -> (q, dofs_per_cell, d, d)."""
        pts = np.atleast_2d(points)[None]
        phi = self.scalar_values(np.array([cell]), pts)[0]
        vals = phi[:, :, None, None, None] * self.sym_basis[None, None]
        return vals.reshape(len(pts[0]), self.dofs_per_cell, self.dim, self.dim)

    def eval_div_basis(self, cell: int, points: np.ndarray) -> np.ndarray:
        """Row-wise divergence of each basis tensor: (q, dofs_per_cell, d)."""
        pts = np.atleast_2d(points)[None]
        grad = self.scalar_gradients(np.array([cell]), pts)[0]
        div = np.einsum("bij,qsj->qsbi", self.sym_basis, grad)
        return div.reshape(len(pts[0]), self.dofs_per_cell, self.dim)

    def evaluate(self, coeffs: np.ndarray, cell: int, points: np.ndarray) -> np.ndarray:
        """Field value of a global DOF vector at points of one cell: (q, d, d)."""
        local = np.asarray(coeffs)[self.cell_dofs(cell)]
        return np.einsum("qnij,n->qij", self.eval_basis(cell, points), local)

    def evaluate_div(self, coeffs: np.ndarray, cell: int, points: np.ndarray) -> np.ndarray:
        local = np.asarray(coeffs)[self.cell_dofs(cell)]
        return np.einsum("qni,n->qi", self.eval_div_basis(cell, points), local)

    def project(self, func, quad_degree: int | None = None) -> np.ndarray:
        """Cellwise L2 projection of a symmetric tensor field onto the space.

        ``func`` maps physical points (n, q, d) to tensors (n, q, d, d). Exact for
        polynomial fields of degree <= k when ``quad_degree >= 2k``.
        """
        quad = make_quadrature(self.dim, quad_degree if quad_degree is not None else 2 * self.degree + 2)
        cells = np.arange(self.mesh.n_cells)
        x = self.geometry.to_physical(cells, quad.xi)
        vals = np.asarray(func(x), dtype=float)
        phi = self.basis.values(quad.xi)
        sqrt_det = np.sqrt(np.abs(self.geometry.det))
        coeffs = np.einsum("q,qs,cqij,bij->csb", quad.weights, phi, vals, self.sym_basis) * sqrt_det[:, None, None]
        return coeffs.reshape(-1)
