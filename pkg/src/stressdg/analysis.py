"""Convergence studies, spurious-mode scans, displacement recovery and the inf-sup check."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .eigen import DEFAULT_CLUSTER_TOL
from .fem import DGSpace, make_quadrature, scalar_basis
from .material import IsotropicMaterial
from .mesh import DIRICHLET, NEUMANN, Mesh

log = logging.getLogger(__name__)


# -- displacement -------------------------------------------------------------------


@dataclass
class DisplacementField:
    """Cellwise vector polynomial ``u_h`` stored in the orthonormal P_k modes of each cell."""

    space: DGSpace
    coeffs: np.ndarray  # (ncells, scalar_dim, d)

    def evaluate(self, cell: int, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)[None]
        phi = self.space.scalar_values(np.array([cell]), pts)[0]
        return phi @ self.coeffs[cell]

    def l2_norm(self) -> float:
        return float(np.sqrt(np.sum(self.coeffs**2)))


def cell_divergence_coeffs(space: DGSpace, sigma: np.ndarray) -> np.ndarray:
    """Coefficients of ``div_h sigma`` in the L2(K)-orthonormal scalar modes: (nc, s, d).

    ``div_h sigma`` has degree ``k - 1``, so the projection onto P_k is exact.
    """
    mesh = space.mesh
    d, k = space.dim, space.degree
    quad = make_quadrature(d, 2 * k)
    basis = space.basis
    phi = basis.values(quad.xi)  # (q, s) reference
    G = basis.gradients(quad.xi)  # (q, s, d) reference
    Jinv = space.geometry.jac_inv
    grad = np.einsum("crp,qsr->cqsp", Jinv, G)  # unscaled physical gradients
    c = np.asarray(sigma).reshape(mesh.n_cells, space.scalar_dim, space.sym_dim)
    E = space.sym_basis
    # div at quad points: sum_s,b c[s,b] E_b[m,j] grad_s[j]
    div = np.einsum("csb,bmj,cqsj->cqm", c, E, grad)
    # physical modes are reference modes / sqrt(det); integral picks det; scales cancel
    return np.einsum("q,qt,cqm->ctm", quad.weights, phi, div)


def recover_displacement(
    sigma: np.ndarray,
    kappa: float,
    material: IsotropicMaterial,
    space: DGSpace,
    cluster_tol: float = DEFAULT_CLUSTER_TOL,
) -> DisplacementField:
    """``u_h = -div_h sigma_h / (rho (kappa_h - 1))`` cellwise."""
    if kappa <= 1.0 + cluster_tol:
        raise ValueError("no displacement for kernel modes (kappa_h ~ 1)")
    rho = material.cell_density(space.mesh)
    div = cell_divergence_coeffs(space, sigma)
    return DisplacementField(space, -div / (rho[:, None, None] * (kappa - 1.0)))


# -- rates ---------------------------------------------------------------------------


def convergence_rates(h: Sequence[float], errors: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """``r_i = log(e_{i-1}/e_i) / log(h_{i-1}/h_i)`` and a flag per rate.

    Equal errors give rate 0 and a flag; zero or non-finite errors give NaN and a flag.
    """
    h = np.asarray(h, float)
    e = np.abs(np.asarray(errors, float))
    rates = np.full(len(h) - 1, np.nan)
    flags = np.zeros(len(h) - 1, dtype=bool)
    for i in range(1, len(h)):
        a, b = e[i - 1], e[i]
        if not (np.isfinite(a) and np.isfinite(b)) or a == 0 or b == 0:
            flags[i - 1] = True
            continue
        if a == b:
            rates[i - 1] = 0.0
            flags[i - 1] = True
            continue
        rates[i - 1] = math.log(a / b) / math.log(h[i - 1] / h[i])
    return rates, flags


def match_nearest(
    targets: Sequence[float], values: Sequence[float], cluster_rtol: float = 1e-3
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy nearest-value matching of each target to a distinct value.

    Targets within ``cluster_rtol`` (relative) of each other form one cluster, such as a
    double eigenvalue split by the mesh; a cluster of size ``m`` takes ``m`` values,
    matched to its targets in sorted order. Returns the matched values (NaN when nothing
    is left) and a conflict flag, set when a cluster's nearest values were partly taken by
    another cluster.
    """
    targets = np.asarray(targets, float)
    values = np.asarray(values, float)
    out = np.full(len(targets), np.nan)
    conflict = np.zeros(len(targets), dtype=bool)
    order = np.argsort(targets, kind="stable")
    groups: list[list[int]] = []
    for i in order:
        if groups and abs(targets[i] - targets[groups[-1][-1]]) <= cluster_rtol * max(abs(targets[i]), 1e-300):
            groups[-1].append(int(i))
        else:
            groups.append([int(i)])
    centers = [float(np.mean(targets[g])) for g in groups]
    pairs = sorted(
        ((abs(c - v), gi, j) for gi, c in enumerate(centers) for j, v in enumerate(values)),
        key=lambda p: p[0],
    )
    taken: list[list[int]] = [[] for _ in groups]
    used_v = set()
    for _, gi, j in pairs:
        if len(taken[gi]) == len(groups[gi]) or j in used_v:
            continue
        taken[gi].append(j)
        used_v.add(j)
    for g, c, js in zip(groups, centers, taken):
        vals = np.sort(values[js])
        out[g[: len(vals)]] = vals
        if len(values):
            best = set(np.argsort(np.abs(values - c), kind="stable")[: len(g)].tolist())
            if not best <= set(js):
                conflict[g] = True
    return out, conflict


@dataclass
class RateStudy:
    """Eigenvalue convergence table for one degree ``k``.

    ``values[i, j]`` is the computed quantity (``scale * (kappa - 1)``) of eigenvalue ``j`` on
    mesh ``i``; rates are from consecutive meshes.
    """

    h: np.ndarray
    k: int
    a0: float
    values: np.ndarray
    reference: np.ndarray
    provenance: str
    rates: np.ndarray = field(init=False)
    flags: np.ndarray = field(init=False)

    def __post_init__(self):
        n_h, n_e = self.values.shape
        self.rates = np.full((n_h - 1, n_e), np.nan)
        self.flags = np.zeros((n_h - 1, n_e), dtype=bool)
        for j in range(n_e):
            err = self.values[:, j] - self.reference[j]
            r, f = convergence_rates(self.h, err)
            self.rates[:, j] = r
            self.flags[:, j] = f | ~np.isfinite(self.values[1:, j]) | ~np.isfinite(self.values[:-1, j])

    @property
    def errors(self) -> np.ndarray:
        return np.abs(self.values - self.reference[None, :])

    @property
    def average_rates(self) -> np.ndarray:
        out = np.full(self.values.shape[1], np.nan)
        for j in range(len(out)):
            ok = ~self.flags[:, j] & np.isfinite(self.rates[:, j])
            if ok.any():
                out[j] = self.rates[ok, j].mean()
        return out

    def monotone(self, slack: float = 1e-6) -> np.ndarray:
        """Per eigenvalue: do the errors decrease from mesh to mesh (up to ``slack``)?"""
        e = self.errors
        return np.all(e[1:] <= e[:-1] + slack, axis=0)

    def write_csv(self, path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                for line in header.splitlines():
                    fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["h", "k", "a0", "eig_index", "value", "reference", "rate", "flag"])
            for i, hv in enumerate(self.h):
                for j in range(self.values.shape[1]):
                    rate = "" if i == 0 or not np.isfinite(self.rates[i - 1, j]) else f"{self.rates[i - 1, j]:.4f}"
                    flag = "" if i == 0 else int(self.flags[i - 1, j])
                    w.writerow([f"{hv:.6g}", self.k, self.a0, j, f"{self.values[i, j]:.12g}", f"{self.reference[j]:.12g}", rate, flag])

    def summary(self) -> str:
        n_e = self.values.shape[1]
        lines = [f"k={self.k}  a0={self.a0}  reference: {self.provenance}"]
        lines.append("h".ljust(10) + "".join(f"value{j + 1:<13}rate      " for j in range(n_e)))
        for i, hv in enumerate(self.h):
            row = f"{hv:<10.4g}"
            for j in range(n_e):
                rate = "" if i == 0 else f"{self.rates[i - 1, j]:+.2f}" + ("*" if self.flags[i - 1, j] else "")
                row += f"{self.values[i, j]:<18.10f}{rate:<10}"
            lines.append(row)
        lines.append("reference ".ljust(10) + "".join(f"{r:<28.10f}" for r in self.reference))
        lines.append("avg(r)".ljust(10) + "".join(f"{'':18}{r:<10.2f}" for r in self.average_rates))
        return "\n".join(lines)


def run_rate_study(
    problem,
    ns: Sequence[int],
    references: Sequence[float] | None = None,
    reference_problem=None,
    n_eigs: int = 3,
    scale: float = 1.0,
    h_of: Callable[[int], float] | None = None,
) -> RateStudy:
    """Solve ``problem`` on meshes ``n in ns`` and tabulate ``scale * (kappa - 1)``.

    References are either given (``analytic``) or computed from ``reference_problem``
    (``fine-mesh-oracle``). Eigenvalues are matched to the references by nearest value.
    """
    if len(ns) < 3:
        raise ValueError("a rate study needs at least three mesh sizes")
    if references is None:
        if reference_problem is None:
            raise ValueError("supply references or a reference problem")
        ref = reference_problem.solve(nev=n_eigs + 2)
        references = scale * (ref.essential_kappas[:n_eigs] - 1.0)
        provenance = f"fine-mesh-oracle (k={reference_problem.k}, n={reference_problem.n})"
    else:
        provenance = "analytic"
    references = np.asarray(references, float)[:n_eigs]
    values = np.full((len(ns), len(references)), np.nan)
    hs = []
    for i, n in enumerate(ns):
        p = problem.replace(n=n)
        mesh = p.mesh()
        hs.append(h_of(n) if h_of else mesh.mesh_size)
        res = p.solve(p.forms(mesh), nev=len(references) + 2)
        vals = scale * (res.essential_kappas - 1.0)
        matched, conflict = match_nearest(references, vals)
        matched[conflict] = np.nan
        values[i] = matched
        log.info("n=%d h=%.4g values=%s", n, hs[-1], np.array2string(matched, precision=8))
    return RateStudy(np.array(hs), problem.k, problem.penalty.a0, values, references, provenance)


# -- spurious modes ------------------------------------------------------------------


@dataclass
class SpuriousReport:
    a0s: list
    omegas: list  # per a0, the first n_eigs frequencies
    flags: list  # per a0, boolean array
    drift_tol: float
    warnings: list = field(default_factory=list)

    @property
    def flagged(self) -> list[tuple[float, int, float]]:
        return [
            (a0, int(i), float(om[i]))
            for a0, om, fl in zip(self.a0s, self.omegas, self.flags)
            for i in np.nonzero(fl)[0]
        ]

    def table(self) -> str:
        n = max(len(o) for o in self.omegas)
        lines = ["  ".join(f"a0={a0:<12g}" for a0 in self.a0s)]
        for i in range(n):
            cells = []
            for om, fl in zip(self.omegas, self.flags):
                if i < len(om):
                    cells.append(f"{om[i]:.6f}{'*' if fl[i] else ' '}".ljust(15))
                else:
                    cells.append(" " * 15)
            lines.append("  ".join(cells))
        lines.append("* suspect (relative drift > %g across consecutive a0)" % self.drift_tol)
        return "\n".join(lines)

    def write_csv(self, path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                for line in header.splitlines():
                    fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["a0", "eig_index", "omega", "suspect"])
            for a0, om, fl in zip(self.a0s, self.omegas, self.flags):
                for i, (o, f) in enumerate(zip(om, fl)):
                    w.writerow([a0, i, f"{o:.10g}", int(f)])


def flag_drift(runs: Sequence[np.ndarray], n_eigs: int, drift_tol: float = 0.02) -> list[np.ndarray]:
    """Flag values whose nearest counterpart in a neighbouring run drifts by > ``drift_tol``.

    Each run should carry a few values beyond ``n_eigs`` so genuine eigenvalues near the
    end of the list still find their partner.
    """
    flags = [np.zeros(min(n_eigs, len(r)), dtype=bool) for r in runs]
    for i in range(len(runs) - 1):
        for a, b in ((i, i + 1), (i + 1, i)):
            other = np.asarray(runs[b])
            if other.size == 0:
                continue
            for j in range(len(flags[a])):
                v = runs[a][j]
                near = other[np.argmin(np.abs(other - v))]
                if abs(near - v) > drift_tol * abs(v):
                    flags[a][j] = True
    return flags


def spurious_scan(problem, a0s: Sequence[float], n_eigs: int = 10, drift_tol: float = 0.02, margin: int = 4) -> SpuriousReport:
    """Solve for several penalty values and flag eigenvalues that move with ``a0``."""
    if len(a0s) < 2:
        raise ValueError("need >= 2 penalty values")
    mesh = problem.mesh()
    runs, warns = [], []
    for a0 in a0s:
        p = problem.with_a0(a0)
        res = p.solve(p.forms(mesh), nev=n_eigs + margin)
        om = res.omegas
        if len(om) < n_eigs:
            msg = f"a0={a0}: only {len(om)} essential eigenvalues found"
            log.warning(msg)
            warns.append(msg)
        runs.append(om)
    flags = flag_drift(runs, n_eigs, drift_tol)
    return SpuriousReport(list(a0s), [r[:n_eigs] for r in runs], flags, drift_tol, warns)


# -- inf-sup -------------------------------------------------------------------------


def _lattice(dim: int, p: int) -> list[tuple[int, ...]]:
    """Barycentric multi-indices of total degree ``p`` in ``dim + 1`` entries."""
    return [a for a in itertools.product(range(p + 1), repeat=dim + 1) if sum(a) == p]


class LagrangeSpace:
    """Continuous vector P_p Lagrange space; only what the inf-sup check needs."""

    def __init__(self, mesh: Mesh, p: int):
        if p < 1:
            raise ValueError("Lagrange degree must be >= 1")
        self.mesh, self.p = mesh, p
        d = mesh.dim
        self.local = _lattice(d, p)
        nodes: dict[tuple, int] = {}
        cell_nodes = np.empty((mesh.n_cells, len(self.local)), dtype=np.int64)
        for c, verts in enumerate(mesh.cells):
            for i, alpha in enumerate(self.local):
                key = tuple(sorted((int(verts[j]), a) for j, a in enumerate(alpha) if a > 0))
                cell_nodes[c, i] = nodes.setdefault(key, len(nodes))
        self.cell_nodes = cell_nodes
        self.node_keys = list(nodes)
        self.n_nodes = len(nodes)
        # reference nodal basis: coefficients of monomials in xi
        xi = np.array([[a[j + 1] / p for j in range(d)] for a in self.local])
        self._exps = [e for e in itertools.product(range(p + 1), repeat=d) if sum(e) <= p]
        V = self._mono(xi)
        self._coef = np.linalg.inv(V)

    def _mono(self, xi):
        return np.stack([np.prod(xi ** np.array(e), axis=-1) for e in self._exps], axis=-1)

    def _mono_grad(self, xi):
        d = xi.shape[-1]
        out = np.zeros(xi.shape[:-1] + (len(self._exps), d))
        for m, e in enumerate(self._exps):
            for j in range(d):
                if e[j] == 0:
                    continue
                ee = np.array(e)
                ee[j] -= 1
                out[..., m, j] = e[j] * np.prod(xi**ee, axis=-1)
        return out

    def ref_gradients(self, xi):
        """(q, nloc, d) reference gradients of the nodal basis."""
        return np.einsum("qmd,mn->qnd", self._mono_grad(xi), self._coef)

    def boundary_nodes(self, kinds: Sequence[int]) -> np.ndarray:
        """Nodes lying on boundary facets of the given kinds."""
        mesh = self.mesh
        fac = {tuple(sorted(int(v) for v in mesh.facet_vertices[f])) for f in mesh.boundary_facets if mesh.facet_kind[f] in kinds}
        out = [i for i, key in enumerate(self.node_keys) if _on_any_facet(key, fac, mesh.dim)]
        return np.array(out, dtype=np.int64)


def _on_any_facet(key, facets, dim) -> bool:
    verts = tuple(sorted(v for v, _ in key))
    if len(verts) > dim:
        return False
    return any(set(verts) <= set(f) for f in facets)


def infsup_constant(mesh: Mesh, k: int, zero_on: str = "all", return_details: bool = False):
    """Discrete inf-sup constant of the pair {continuous P_{k+1}^d, discontinuous P_k}.

    ``beta^2`` is the smallest eigenvalue of ``B H^{-1} B^T`` against the pressure mass
    (the identity in orthonormal modes), with ``H`` the H1-seminorm Gram matrix on the
    free velocity nodes and ``B`` the ``(div v, q)`` coupling. ``zero_on`` picks where
    velocities vanish: ``"all"`` (whole boundary), ``"dirichlet"`` or ``"neumann"``
    facets. When velocities vanish on the whole boundary the constant pressure is removed.
    """
    kinds = {"all": (DIRICHLET, NEUMANN), "dirichlet": (DIRICHLET,), "neumann": (NEUMANN,)}
    if zero_on not in kinds:
        raise ValueError(f"unknown velocity boundary option {zero_on!r}")
    d = mesh.dim
    V = LagrangeSpace(mesh, k + 1)
    fixed = V.boundary_nodes(kinds[zero_on])
    if fixed.size == 0:
        raise ValueError("singular H: no velocity constraint on any boundary facet")
    whole = bool(np.all(np.isin(mesh.facet_kind[mesh.boundary_facets], kinds[zero_on])))

    quad = make_quadrature(d, 2 * k)
    G = V.ref_gradients(quad.xi)  # (q, nl, d)
    P = scalar_basis(d, k)
    phi = P.values(quad.xi)  # (q, s)
    Jinv = mesh_jinv(mesh)
    det = np.abs(np.linalg.det(np.linalg.inv(Jinv)))
    grad = np.einsum("crp,qnr->cqnp", Jinv, G)  # physical gradients
    # H1 seminorm blocks (scalar) and divergence blocks per component
    Hloc = np.einsum("q,cqnp,cqmp->cnm", quad.weights, grad, grad) * det[:, None, None]
    Bloc = np.einsum("q,qs,cqnp->csnp", quad.weights, phi, grad) * np.sqrt(det)[:, None, None, None]

    nl, ns = len(V.local), P.size
    nn = V.n_nodes
    cn = V.cell_nodes
    rows = np.repeat(cn[:, :, None], nl, axis=2)
    cols = np.repeat(cn[:, None, :], nl, axis=1)
    Hs = sp.coo_matrix((Hloc.ravel(), (rows.ravel(), cols.ravel())), shape=(nn, nn)).tocsr()
    H = sp.block_diag([Hs] * d, format="csr")
    prow = (np.arange(mesh.n_cells)[:, None] * ns + np.arange(ns)[None, :])
    brow = np.broadcast_to(prow[:, :, None, None], Bloc.shape)
    bcol = cn[:, None, :, None] + nn * np.arange(d)[None, None, None, :]
    bcol = np.broadcast_to(bcol, Bloc.shape)
    B = sp.coo_matrix((Bloc.ravel(), (brow.ravel(), bcol.ravel())), shape=(mesh.n_cells * ns, d * nn)).tocsr()

    free = np.ones(d * nn, dtype=bool)
    for c in range(d):
        free[fixed + c * nn] = False
    Hf = H[free][:, free].tocsc()
    Bf = B[:, free]
    lu = splu(Hf)
    X = lu.solve(Bf.T.toarray())
    S = Bf @ X
    S = 0.5 * (S + S.T)
    if whole:
        c = _constant_pressure(mesh, P)
        Z = sla.null_space(c[None, :])
        S = Z.T @ S @ Z
    w = np.linalg.eigvalsh(S)
    beta = float(np.sqrt(max(w[0], 0.0)))
    if return_details:
        return beta, {"n_velocity": int(free.sum()), "n_pressure": S.shape[0], "mean_removed": whole}
    return beta


def mesh_jinv(mesh: Mesh) -> np.ndarray:
    X = mesh.vertices[mesh.cells]
    jac = np.transpose(X[:, 1:, :] - X[:, :1, :], (0, 2, 1))
    return np.linalg.inv(jac)


def _constant_pressure(mesh: Mesh, P) -> np.ndarray:
    """Coefficients of the constant function 1 in the orthonormal P_k modes."""
    quad = make_quadrature(mesh.dim, P.degree)
    ref = quad.weights @ P.values(quad.xi)  # integral of each reference mode
    det = mesh.cell_volumes * math.factorial(mesh.dim)
    return (np.sqrt(det)[:, None] * ref[None, :]).ravel()
