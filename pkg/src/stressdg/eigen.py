"""Generalized symmetric eigensolvers for ``a_h(s, t) = kappa (s, t)_A``.

The spectrum has a large cluster at ``kappa = 1`` (the discrete kernel). The dense path
computes everything; the sparse path uses shift-invert Lanczos either around a target
(``nearest``) or just above the cluster (``above``), where the shifted-and-inverted
kernel eigenvalues are negative and the lowest essential ones are the largest.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, eigsh, splu

from . import pardiso
from .assembly import AssembledForms

log = logging.getLogger(__name__)

DEFAULT_DENSE_CAP = 6000
DEFAULT_CLUSTER_TOL = 1e-6
DEFAULT_SHIFT_DELTA = 1e-2
RQI_MAX_DOFS = 60000
DEFLATE_RATIO = 1e6


class EigenSolveError(RuntimeError):
    pass


class FilteredSpectrum(NamedTuple):
    kernel_count: int
    essential: np.ndarray
    omegas: np.ndarray
    violations: np.ndarray


def filter_spectrum(kappas, cluster_tol: float = DEFAULT_CLUSTER_TOL) -> FilteredSpectrum:
    """Split ascending eigenvalues into the ``kappa = 1`` cluster and essential ones.

    Values below ``1 - cluster_tol`` contradict coercivity of ``a_h``; they are returned as
    ``violations`` (and logged) instead of being folded into either group.
    """
    k = np.asarray(kappas, dtype=float)
    if k.size and np.any(np.diff(k) < 0):
        raise ValueError("eigenvalues must be sorted ascending")
    below = k < 1.0 - cluster_tol
    if np.any(below):
        log.warning("%d eigenvalue(s) below 1 - %g: coercivity violated", int(below.sum()), cluster_tol)
    cluster = np.abs(k - 1.0) <= cluster_tol
    essential = k[k > 1.0 + cluster_tol]
    return FilteredSpectrum(int(cluster.sum()), essential, np.sqrt(essential - 1.0), k[below])


@dataclass
class SpectrumResult:
    """Eigenpairs of ``A x = kappa M x`` with the kernel cluster identified.

    ``kappas`` are ascending; ``vectors[:, i]`` is M-normalized with its first significant
    entry positive. ``kernel_count`` is the size of the whole ``kappa = 1`` cluster when it
    is known (dense path, or sparse path with inertia counts) and ``None`` otherwise.
    """

    kappas: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray
    kernel_count: int | None
    cluster_tol: float = DEFAULT_CLUSTER_TOL
    method: str = "dense"
    shift: float | None = None
    info: dict = field(default_factory=dict)

    @property
    def is_kernel(self) -> np.ndarray:
        return np.abs(self.kappas - 1.0) <= self.cluster_tol

    @property
    def essential_mask(self) -> np.ndarray:
        return self.kappas > 1.0 + self.cluster_tol

    @property
    def essential_kappas(self) -> np.ndarray:
        return self.kappas[self.essential_mask]

    @property
    def omegas(self) -> np.ndarray:
        return np.sqrt(self.essential_kappas - 1.0)

    @property
    def essential_vectors(self) -> np.ndarray:
        return self.vectors[:, self.essential_mask]

    @property
    def kernel_vectors(self) -> np.ndarray:
        return self.vectors[:, self.is_kernel]

    @property
    def violations(self) -> np.ndarray:
        return self.kappas[self.kappas < 1.0 - self.cluster_tol]

    def by_distance(self, target: float | None = None) -> np.ndarray:
        """Eigenvalues ordered by distance to ``target`` (default: the shift used)."""
        t = self.shift if target is None else target
        if t is None:
            raise ValueError("no target given and no shift recorded")
        return self.kappas[np.argsort(np.abs(self.kappas - t), kind="stable")]

    def write_csv(self, path, header: str | None = None) -> None:
        """Columns ``index,kappa,omega,is_kernel,residual``; ``omega`` empty for non-essential rows."""
        with open(path, "w", newline="") as fh:
            if header:
                for line in header.splitlines():
                    fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["index", "kappa", "omega", "is_kernel", "residual"])
            ess = self.essential_mask
            ker = self.is_kernel
            for i, (kap, res) in enumerate(zip(self.kappas, self.residuals)):
                om = f"{np.sqrt(kap - 1.0):.12g}" if ess[i] else ""
                w.writerow([i, f"{kap:.15g}", om, int(ker[i]), f"{res:.3e}"])


# -- helpers ---------------------------------------------------------------------------


def normalize_signs(X: np.ndarray, rel: float = 1e-8) -> np.ndarray:
    """Flip columns so that their first entry above ``rel * max|x|`` is positive."""
    X = np.array(X, copy=True)
    for j in range(X.shape[1]):
        col = X[:, j]
        big = np.nonzero(np.abs(col) > rel * np.abs(col).max())[0]
        if big.size and col[big[0]] < 0:
            X[:, j] = -col
    return X


def _m_normalize(X: np.ndarray, M) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->j", X, M @ X))
    return X / norms


def residuals(A, M, kappas, X) -> np.ndarray:
    """Relative residuals ``|A x - kappa M x| / |M x|`` per column.

    ``A`` is a matrix or anything with an ``apply_stiffness`` method.
    """
    MX = M @ X
    AX = A.apply_stiffness(X) if hasattr(A, "apply_stiffness") else A @ X
    R = AX - MX * kappas[None, :]
    return np.linalg.norm(R, axis=0) / np.linalg.norm(MX, axis=0)


def cell_cholesky(mass_blocks: np.ndarray) -> np.ndarray:
    """Lower Cholesky factors of the per-cell mass blocks."""
    try:
        return np.linalg.cholesky(mass_blocks)
    except np.linalg.LinAlgError:
        raise EigenSolveError("mass block not SPD: basis conditioning failure") from None


def _block_diag(blocks: np.ndarray) -> sp.bsr_matrix:
    nc, n, _ = blocks.shape
    return sp.bsr_matrix((blocks, np.arange(nc), np.arange(nc + 1)), shape=(nc * n, nc * n))


def constant_trace_mode(forms: AssembledForms, ratio: float = DEFLATE_RATIO) -> np.ndarray | None:
    """Coefficients of ``sigma = I`` when it should be deflated, else None.

    Without Neumann facets the constant field ``I`` has no jumps and no divergence, so it
    is an exact kernel eigenvector for any material. Every other eigenvector is
    M-orthogonal to it, which is the mean-trace condition ``(tr sigma, 1)_A = 0``. Its
    mass ``(A I, I)`` scales like ``1 / (d lambda + 2 mu)``; once the compliance
    anisotropy ``a_plus / a_minus`` exceeds ``ratio`` roundoff in ``c_h(I, I)`` would give
    it an arbitrary eigenvalue, so the solvers work on its M-orthogonal complement and
    return it separately with ``kappa = 1``.
    """
    if forms.space.mesh.count("neumann") or forms.material.a_plus / forms.material.a_minus < ratio:
        return None
    d = forms.space.dim
    return forms.space.project(lambda x: np.broadcast_to(np.eye(d), x.shape[:-1] + (d, d)))


def _with_mode(w: np.ndarray, X: np.ndarray, v: np.ndarray, M) -> tuple[np.ndarray, np.ndarray]:
    """Insert the deflated kernel pair ``(1, v)`` into an ascending spectrum."""
    v = v / np.sqrt(v @ (M @ v))
    w = np.concatenate([[1.0], w])
    X = np.column_stack([v, X])
    order = np.argsort(w, kind="stable")
    return w[order], X[:, order]


# -- dense path ------------------------------------------------------------------------


def _dense_pencil(A: np.ndarray, M: np.ndarray, mass_blocks: np.ndarray | None):
    """Ascending eigenpairs of the dense pencil ``(A, M)``.

    The pencil is reduced through a Cholesky factor of ``A`` and solved for
    ``theta = 1 / kappa``. Reducing through ``M`` instead loses accuracy near
    incompressibility, where the trace part of ``M`` degenerates and ``L^{-1} A L^{-T}``
    has entries of order ``1 / (lambda + mu)``. When ``A`` is not positive definite (a
    penalty below the coercivity bound) the pencil is reduced through ``M``.
    """
    A = 0.5 * (A + A.T)
    try:
        theta, X = sla.eigh(M, A, lower=True)
    except np.linalg.LinAlgError:
        log.info("stiffness not positive definite; reducing through the mass matrix")
        if mass_blocks is None:
            return sla.eigh(A, 0.5 * (M + M.T), lower=True)
        L = cell_cholesky(mass_blocks)
        Linv = _block_diag(np.linalg.inv(L))
        K = (Linv @ sp.csr_matrix(A) @ Linv.T).toarray()
        w, Y = sla.eigh(K, lower=True)
        return w, Linv.T @ Y
    # theta of order eps belongs to pressure-like modes with kappa near infinity;
    # roundoff may push it below zero
    with np.errstate(divide="ignore"):
        w = np.where(theta > 0.0, 1.0 / theta, np.inf)[::-1]
    return w, X[:, ::-1]


def solve_dense(
    forms: AssembledForms,
    nev: int | None = None,
    dense_cap: int = DEFAULT_DENSE_CAP,
    cluster_tol: float = DEFAULT_CLUSTER_TOL,
    keep_all: bool = False,
) -> SpectrumResult:
    """Full spectrum of the pencil ``(A, M)`` (see :func:`_dense_pencil`).

    Returns the kernel cluster, any coercivity violations and the ``nev`` lowest essential
    eigenpairs (all of them when ``nev`` is None or ``keep_all`` is set).
    """
    n = forms.stiffness.shape[0]
    if n > dense_cap:
        raise EigenSolveError(f"{n} dofs exceed the dense cap {dense_cap}; use solve_shift_invert")
    A = sp.csr_matrix(forms.stiffness)
    v = constant_trace_mode(forms)
    if v is None:
        w, X = _dense_pencil(A.toarray(), forms.mass.toarray(), forms.mass_blocks)
    else:
        # Householder reflector H with H g ~ e_1; its other columns span g-perp
        g = forms.mass @ v
        u = g / np.linalg.norm(g)
        h = u.copy()
        h[0] += np.copysign(1.0, u[0])
        h /= np.linalg.norm(h)

        def reflect(B):
            B = B - 2.0 * np.outer(h, h @ B)
            return (B - 2.0 * np.outer(B @ h, h))[1:, 1:]

        w, Y = _dense_pencil(reflect(A.toarray()), reflect(forms.mass.toarray()), None)
        Y = np.vstack([np.zeros((1, Y.shape[1])), Y])
        X = Y - 2.0 * np.outer(h, h @ Y)
        w, X = _with_mode(w, X, v, forms.mass)
    if not keep_all and nev is not None:
        ess = np.nonzero(w > 1.0 + cluster_tol)[0]
        keep = np.concatenate([np.nonzero(w <= 1.0 + cluster_tol)[0], ess[:nev]])
        w, X = w[keep], X[:, keep]
    X = normalize_signs(_m_normalize(X, forms.mass))
    res = residuals(forms.stiffness, forms.mass, w, X)
    kc = int(np.sum(np.abs(w - 1.0) <= cluster_tol))
    return SpectrumResult(w, X, res, kc, cluster_tol, "dense")


def solve_dense_matrices(A: np.ndarray, M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Plain dense generalized solve for small explicit matrices (e.g. ``A=[2], M=[1]``)."""
    w, X = sla.eigh(np.atleast_2d(A), np.atleast_2d(M))
    return w, normalize_signs(X)


# -- sparse path -----------------------------------------------------------------------


def _upper_csr(A: sp.spmatrix, M_blocks: np.ndarray | None = None, shift: float = 0.0) -> sp.csr_matrix:
    """Upper triangle of ``A - shift * blockdiag(M_blocks)`` as CSR with int32 indices.

    Works block row by block row so only the upper part is ever materialized.
    """
    A = sp.bsr_matrix(A)
    A.sort_indices()
    nb = A.blocksize[0]
    nbr = A.shape[0] // nb
    tri = np.triu(np.ones((nb, nb), dtype=bool))
    upper_blocks = np.count_nonzero(A.indices >= np.repeat(np.arange(nbr), np.diff(A.indptr)))
    nnz = (upper_blocks - nbr) * nb * nb + nbr * int(tri.sum())
    if nnz >= 2**31:
        raise EigenSolveError("matrix too large for 32-bit sparse indices")
    data = np.empty(nnz)
    cols = np.empty(nnz, dtype=np.int32)
    ptr = np.zeros(A.shape[0] + 1, dtype=np.int32)
    pos = 0
    local = np.arange(nb)
    for I in range(nbr):
        p, q = A.indptr[I], A.indptr[I + 1]
        bc = A.indices[p:q]
        sel = bc >= I
        bc = bc[sel]
        blocks = A.data[p:q][sel]
        if bc[0] != I:
            raise EigenSolveError(f"missing diagonal block in block row {I}")
        blocks = blocks.copy()
        if M_blocks is not None and shift != 0.0:
            blocks[0] -= shift * M_blocks[I]
        m = len(bc)
        full = blocks.transpose(1, 0, 2).reshape(nb, m * nb)
        fcol = (bc[:, None] * nb + local[None, :]).reshape(-1)
        mask = np.ones((nb, m * nb), dtype=bool)
        mask[:, :nb] = tri
        cnt = mask.sum(axis=1)
        k = int(cnt.sum())
        data[pos : pos + k] = full[mask]
        cols[pos : pos + k] = np.broadcast_to(fcol, (nb, m * nb))[mask]
        ptr[I * nb + 1 : (I + 1) * nb + 1] = pos + np.cumsum(cnt)
        pos += k
    return sp.csr_matrix((data, cols, ptr), shape=A.shape)


def _add_border(K: sp.csr_matrix, g: np.ndarray) -> sp.csr_matrix:
    """Upper CSR of ``[[K, g], [g^T, 0]]`` from the upper CSR of ``K``."""
    n = K.shape[0]
    nz = g != 0.0
    extra = np.concatenate([nz.astype(np.int32), [1]])
    counts = np.concatenate([np.diff(K.indptr), [0]]) + extra
    ptr = np.zeros(n + 2, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    if ptr[-1] >= 2**31:
        raise EigenSolveError("matrix too large for 32-bit sparse indices")
    ptr = ptr.astype(np.int32)
    data = np.empty(ptr[-1])
    cols = np.empty(ptr[-1], dtype=np.int32)
    # old entries keep their order; the border entry goes last in its row
    row = np.repeat(np.arange(n), np.diff(K.indptr))
    dest = ptr[row] + (np.arange(K.nnz) - K.indptr[row])
    data[dest] = K.data
    cols[dest] = K.indices
    last = ptr[1 : n + 1][nz] - 1
    data[last] = g[nz]
    cols[last] = n
    data[-1] = 0.0
    cols[-1] = n
    return sp.csr_matrix((data, cols, ptr), shape=(n + 1, n + 1))


class ShiftedSystem:
    """``A - s M`` held only as its upper triangle, with the shift changeable in place.

    ``M`` must be block diagonal (the DG mass), so a new shift only touches the upper
    parts of the diagonal blocks. Once built, the stiffness matrix itself is no longer
    needed: products with ``A`` are ``(A - s M) x + s M x``.

    With a ``border`` vector ``g`` the stored matrix is ``[[A - s M, g], [g^T, 0]]``,
    whose solves restrict ``A - s M`` to the complement ``g^T x = 0`` (used to deflate a
    known eigenvector). The border adds exactly one negative eigenvalue to the inertia.
    """

    def __init__(
        self, A: sp.spmatrix, mass: sp.spmatrix, mass_blocks: np.ndarray, shift: float, border: np.ndarray | None = None
    ):
        K = _upper_csr(A, mass_blocks, shift)
        self.n = K.shape[0]
        if border is not None:
            K = _add_border(K, border)
        self.K = K
        self.border = border
        self.mass = mass
        self.mass_blocks = mass_blocks
        self.shift = float(shift)
        self._diag = self.K.diagonal()

    @property
    def shape(self):
        return (self.n, self.n)

    def set_shift(self, shift: float) -> None:
        """Move the shift to ``shift`` by updating the diagonal-block entries in place."""
        delta = float(shift) - self.shift
        if delta == 0.0:
            return
        K, nb = self.K, self.mass_blocks.shape[1]
        for I, blk in enumerate(self.mass_blocks):
            for r in range(nb):
                start = K.indptr[I * nb + r]
                K.data[start : start + nb - r] -= delta * blk[r, r:]
        self.shift = float(shift)
        self._diag = K.diagonal()

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """``(A - s M) x`` (bordered when a border is set) for vectors or column blocks."""
        K = self.K
        d = self._diag if x.ndim == 1 else self._diag[:, None]
        return K @ x + K.T @ x - d * x

    def apply_stiffness(self, x: np.ndarray) -> np.ndarray:
        """``A x`` for vectors of the unbordered size."""
        if self.border is not None:
            pad = np.zeros((1,) + x.shape[1:])
            y = self.matvec(np.concatenate([x, pad]))[: self.n]
        else:
            y = self.matvec(x)
        return y + self.shift * (self.mass @ x)

    def full_csc(self) -> sp.csc_matrix:
        K = self.K
        return (K + K.T - sp.diags(self._diag)).tocsc()


class _Factor:
    """Factorization of a :class:`ShiftedSystem` at its current shift."""

    def __init__(self, system: ShiftedSystem, backend: str, refine_steps: int = 2):
        self.system = system
        self.backend = backend
        self.refine_steps = refine_steps
        self.negative = None
        self._ldlt = None
        self._lu = None
        if backend == "pardiso":
            self._ldlt = pardiso.PardisoLDLT(system.K)
        self.refactor()

    def refactor(self) -> None:
        """Factorize the system at its current shift (reuses the symbolic analysis)."""
        shift = self.system.shift
        if self.backend == "pardiso":
            try:
                self._ldlt.factorize()
            except pardiso.PardisoError as exc:
                raise np.linalg.LinAlgError(str(exc)) from None
            self.negative = self._ldlt.negative_count
            if self._ldlt.perturbed_pivots:
                log.info("pardiso perturbed %d pivots at shift %.6g", self._ldlt.perturbed_pivots, shift)
            return
        self._lu = None
        try:
            self._lu = splu(self.system.full_csc())
        except RuntimeError as exc:
            raise np.linalg.LinAlgError(str(exc)) from None
        d = self._lu.U.diagonal()
        if np.any(d == 0) or not np.all(np.isfinite(d)):
            raise np.linalg.LinAlgError("singular factor")

    def _raw_solve(self, b: np.ndarray) -> np.ndarray:
        if self.backend == "pardiso":
            return self._ldlt.solve(b)
        return self._lu.solve(b)

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve with a few steps of iterative refinement against the unfactored operator.

        For a bordered system ``b`` has the unbordered size; the result lies in the
        complement of the border.
        """
        b = np.asarray(b, dtype=float)
        n = self.system.n
        if self.system.border is not None:
            b = np.concatenate([b, np.zeros((1,) + b.shape[1:])])
        x = self._raw_solve(b)
        for _ in range(self.refine_steps):
            x = x + self._raw_solve(b - self.system.matvec(x))
        return x[:n]

    def free(self):
        if self._ldlt is not None:
            self._ldlt.free()
        self._lu = None


def pardiso_available() -> bool:
    return pardiso.available()


def _pick_backend(backend: str) -> str:
    if backend == "auto":
        return "pardiso" if pardiso_available() else "superlu"
    if backend == "pardiso" and not pardiso_available():
        raise EigenSolveError("pardiso backend requested but the MKL runtime is not available")
    if backend not in ("pardiso", "superlu"):
        raise ValueError(f"unknown linear solver backend {backend!r}")
    return backend


def _factor_with_retry(system: ShiftedSystem, backend: str, factor: _Factor | None = None) -> _Factor:
    """Factorize at the system's shift; on failure retry once at a slightly moved shift."""
    shift = system.shift
    for attempt in range(2):
        try:
            if factor is None:
                factor = _Factor(system, backend)
            else:
                factor.refactor()
            return factor
        except (np.linalg.LinAlgError, RuntimeError) as exc:
            if attempt == 1:
                raise EigenSolveError(f"factorization failed at shifts {shift} and {system.shift}: {exc}") from None
            moved = shift * (1.0 + 1e-6) + 1e-9
            log.warning("factorization at shift %.12g failed (%s); retrying at %.12g", shift, exc, moved)
            system.set_shift(moved)


def solve_shift_invert(
    forms: AssembledForms,
    shift: float | None = None,
    nev: int = 6,
    mode: str = "above",
    cluster_tol: float = DEFAULT_CLUSTER_TOL,
    shift_delta: float = DEFAULT_SHIFT_DELTA,
    backend: str = "auto",
    count_kernel: bool = False,
    tol: float = 0.0,
    ncv: int | None = None,
    seed: int = 0,
    refine: str = "auto",
    release_stiffness: bool = False,
) -> SpectrumResult:
    """Shift-invert Lanczos in the M-inner product.

    ``mode="nearest"`` returns the ``nev`` eigenvalues closest to ``shift``;
    ``mode="above"`` returns the ``nev`` smallest eigenvalues above ``shift`` (default
    ``1 + shift_delta``, i.e. the lowest essential ones). With ``count_kernel`` and an
    inertia-revealing backend the full kernel cluster size is counted from a second
    factorization at ``1 - shift_delta``. ``refine="rqi"`` polishes each pair with one
    Rayleigh-quotient step (one extra factorization per pair); ``auto`` does so below
    ``RQI_MAX_DOFS``. ``release_stiffness`` drops ``forms.stiffness`` once the shifted
    matrix is built, which lowers peak memory on large meshes; the forms cannot be used
    for further solves afterwards.
    """
    n = forms.stiffness.shape[0]
    if nev < 1 or nev >= n:
        raise ValueError(f"nev must lie in [1, {n - 1}], got {nev}")
    if mode not in ("above", "nearest"):
        raise ValueError(f"unknown mode {mode!r}")
    if refine not in ("auto", "rqi", "none"):
        raise ValueError(f"unknown refinement {refine!r}")
    if shift is None:
        shift = 1.0 + shift_delta
    backend = _pick_backend(backend)

    deflate = constant_trace_mode(forms)
    border = None
    if deflate is not None:
        border = forms.mass @ deflate
        border /= np.linalg.norm(border)
    system = ShiftedSystem(forms.stiffness, forms.mass, forms.mass_blocks, shift, border)
    if release_stiffness:
        forms.stiffness = None
    factor = _factor_with_retry(system, backend)
    used = system.shift
    M = forms.mass

    op = LinearOperator((n, n), matvec=factor.solve, matmat=factor.solve, dtype=float)
    A_op = LinearOperator((n, n), matvec=system.apply_stiffness, dtype=float)
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(n)
    if border is not None:
        v0 -= border * (border @ v0)
    which = "LA" if mode == "above" else "LM"
    try:
        w, X = eigsh(A_op, k=nev, M=M, sigma=used, which=which, OPinv=op, tol=tol, ncv=ncv, v0=v0)
    except Exception as exc:
        raise EigenSolveError(f"Lanczos iteration failed: {exc}") from exc
    order = np.argsort(w)
    w, X = w[order], X[:, order]
    info = {"backend": backend, "shift_used": used}
    kernel_count = None
    if count_kernel and backend == "pardiso" and mode == "above" and used > 1.0:
        below_hi = factor.negative
        system.set_shift(1.0 - shift_delta)
        factor.refactor()
        kernel_count = below_hi - factor.negative + (deflate is not None)
        info["below_lower_shift"] = factor.negative
    if refine == "auto":
        refine = "rqi" if n <= RQI_MAX_DOFS else "none"
    if refine == "rqi":
        w, X = _refine_rqi(system, factor, w, X)
    factor.free()
    system.set_shift(0.0)
    if deflate is not None:
        w, X = _with_mode(w, X, deflate, M)
        info["deflated"] = "constant trace"
    X = normalize_signs(_m_normalize(X, M))
    res = residuals(system, M, w, X)
    return SpectrumResult(w, X, res, kernel_count, cluster_tol, f"shift-invert/{mode}", used, info)


def _rayleigh_ritz(A, M, X):
    """Rayleigh-Ritz on span(X); ``A`` may be a matrix or a :class:`ShiftedSystem`."""
    G = X.T @ (M @ X)
    s, U = np.linalg.eigh(0.5 * (G + G.T))
    B = X @ (U / np.sqrt(s))
    AB = A.apply_stiffness(B) if isinstance(A, ShiftedSystem) else A @ B
    H = B.T @ AB
    theta, Z = np.linalg.eigh(0.5 * (H + H.T))
    return theta, B @ Z


def _refine_rqi(system: ShiftedSystem, factor: _Factor, w, X):
    """One Rayleigh-quotient step per pair, then Rayleigh-Ritz on the refined block.

    Lanczos vectors far from the shift carry errors of order ``eps * |kernel mode|`` of the
    inverted operator; one inverse step at the Ritz value removes them.
    """
    M = system.mass
    Y = np.array(X, copy=True)
    steps = factor.refine_steps
    factor.refine_steps = 0
    for i, kap in enumerate(w):
        for eps in (1e-10, 1e-7):
            system.set_shift(kap * (1.0 + eps))
            try:
                factor.refactor()
            except (np.linalg.LinAlgError, RuntimeError):
                continue
            y = factor.solve(M @ X[:, i])
            Y[:, i] = y / np.sqrt(y @ (M @ y))
            break
    factor.refine_steps = steps
    return _rayleigh_ritz(system, M, Y)


def solve(
    forms: AssembledForms,
    nev: int = 6,
    dense_cap: int = DEFAULT_DENSE_CAP,
    cluster_tol: float = DEFAULT_CLUSTER_TOL,
    **sparse_options,
) -> SpectrumResult:
    """Dense path under the cap, shift-invert just above the kernel cluster otherwise."""
    if forms.stiffness.shape[0] <= dense_cap:
        return solve_dense(forms, nev=nev, dense_cap=dense_cap, cluster_tol=cluster_tol)
    return solve_shift_invert(forms, nev=nev, cluster_tol=cluster_tol, **sparse_options)
