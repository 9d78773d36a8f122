"""Thin ctypes binding to MKL PARDISO for symmetric indefinite matrices.

Only what the shift-invert eigensolver needs: an LDL^T factorization of an upper-triangle
CSR matrix, refactorization after in-place value changes, solves, and the inertia count.
The matrix arrays are passed to MKL as they are (zero-based, int32), without copies.
"""

from __future__ import annotations

import ctypes
import glob
import os
import site
import sys
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

MTYPE_SYMMETRIC_INDEFINITE = -2
_ERRORS = {
    -1: "input inconsistent",
    -2: "not enough memory",
    -3: "reordering problem",
    -4: "zero pivot, numerical factorization or iterative refinement problem",
    -5: "unclassified (internal) error",
    -6: "reordering failed",
    -7: "diagonal matrix is singular",
    -8: "32-bit integer overflow problem",
    -9: "not enough memory for out-of-core solver",
    -10: "error opening out-of-core files",
    -11: "read/write error with out-of-core files",
}


class PardisoError(RuntimeError):
    pass


def find_mkl_rt() -> str | None:
    """Path of ``libmkl_rt``: ``MKL_RT`` env var first, then common install prefixes."""
    env = os.environ.get("MKL_RT") or os.environ.get("PYPARDISO_MKL_RT")
    if env and os.path.exists(env):
        return env
    roots = {sys.prefix, sys.exec_prefix, "/usr/local", "/usr", site.getuserbase()}
    for root in sorted(roots):
        hits = sorted(glob.glob(f"{root}/lib*/**/libmkl_rt.so*", recursive=True), key=len)
        if hits:
            return hits[0]
    return None


@lru_cache(maxsize=None)
def _library():
    path = find_mkl_rt()
    if path is None:
        return None
    try:
        lib = ctypes.CDLL(path)
    except OSError:
        return None
    i32p = ctypes.POINTER(ctypes.c_int32)
    vp = ctypes.c_void_p
    lib.pardiso.restype = None
    lib.pardiso.argtypes = [vp, i32p, i32p, i32p, i32p, i32p, vp, vp, vp, vp, i32p, vp, i32p, vp, vp, i32p]
    lib.pardisoinit.restype = None
    lib.pardisoinit.argtypes = [vp, i32p, vp]
    return lib


def available() -> bool:
    return _library() is not None


class PardisoLDLT:
    """LDL^T factorization of a symmetric matrix given by its upper triangle in CSR.

    ``K`` must keep its arrays alive and unchanged in structure for the life of the
    factorization; values may change between calls to :meth:`factorize`.
    """

    def __init__(self, K: sp.csr_matrix):
        lib = _library()
        if lib is None:
            raise PardisoError("MKL runtime (libmkl_rt) not found")
        if K.shape[0] != K.shape[1]:
            raise ValueError("matrix must be square")
        if K.indptr.dtype != np.int32 or K.indices.dtype != np.int32:
            raise ValueError("PARDISO binding needs int32 CSR index arrays")
        if not K.has_sorted_indices:
            K.sort_indices()
        self._lib = lib
        self.K = K
        self.n = K.shape[0]
        self._pt = np.zeros(64, dtype=np.int64)
        self.iparm = np.zeros(64, dtype=np.int32)
        mtype = ctypes.c_int32(MTYPE_SYMMETRIC_INDEFINITE)
        lib.pardisoinit(self._pt.ctypes.data, ctypes.byref(mtype), self.iparm.ctypes.data)
        self.iparm[34] = 1  # zero-based indexing
        self._analysed = False
        self._alive = True

    def _call(self, phase: int, b: np.ndarray | None = None) -> np.ndarray | None:
        K = self.K
        if b is None:
            nrhs, bp, x, xp = 1, None, None, None
            dummy = np.zeros(1)
            bp = xp = dummy.ctypes.data
        else:
            b = np.asfortranarray(b, dtype=float)
            nrhs = 1 if b.ndim == 1 else b.shape[1]
            x = np.zeros_like(b)
            bp, xp = b.ctypes.data, x.ctypes.data
        err = ctypes.c_int32(0)
        one = ctypes.c_int32(1)
        self._lib.pardiso(
            self._pt.ctypes.data,
            ctypes.byref(one),
            ctypes.byref(one),
            ctypes.byref(ctypes.c_int32(MTYPE_SYMMETRIC_INDEFINITE)),
            ctypes.byref(ctypes.c_int32(phase)),
            ctypes.byref(ctypes.c_int32(self.n)),
            K.data.ctypes.data,
            K.indptr.ctypes.data,
            K.indices.ctypes.data,
            None,
            ctypes.byref(ctypes.c_int32(nrhs)),
            self.iparm.ctypes.data,
            ctypes.byref(ctypes.c_int32(0)),
            bp,
            xp,
            ctypes.byref(err),
        )
        if err.value != 0:
            raise PardisoError(f"PARDISO phase {phase}: {_ERRORS.get(err.value, 'error')} ({err.value})")
        return x

    def factorize(self) -> None:
        """Symbolic analysis on first use, numerical factorization of the current values."""
        self._call(22 if self._analysed else 12)
        self._analysed = True

    def solve(self, b: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(self._call(33, b))

    @property
    def negative_count(self) -> int:
        """Number of negative eigenvalues of the factorized matrix (inertia)."""
        return int(self.iparm[22])

    @property
    def perturbed_pivots(self) -> int:
        return int(self.iparm[13])

    @property
    def factor_nnz(self) -> int:
        return int(self.iparm[17])

    def free(self) -> None:
        if self._alive and self._analysed:
            self._call(-1)
        self._alive = False

    def __del__(self):
        try:
            self.free()
        except Exception:
            pass
