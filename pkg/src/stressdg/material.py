"""Isotropic Hooke compliance with piecewise-constant density."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .mesh import DIRICHLET, INTERIOR, NEUMANN, Mesh


def lame_from_E_nu(E: float, nu: float) -> tuple[float, float]:
    """Lamé pair ``(lambda, mu)`` from Young's modulus and Poisson's ratio."""
    if E <= 0:
        raise ValueError("Young's modulus must be positive")
    if not -1.0 < nu < 0.5:
        raise ValueError(f"Poisson ratio must lie in (-1, 0.5), got {nu!r}")
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = E / (2.0 * (1.0 + nu))
    return lam, mu


@dataclass(frozen=True)
class Subdomain:
    id: int
    rho: float
    lam: float
    mu: float

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError(f"subdomain {self.id}: density must be positive")
        if self.mu <= 0:
            raise ValueError(f"subdomain {self.id}: mu must be positive")


class IsotropicMaterial:
    """Per-subdomain ``(rho, lambda, mu)`` records.

    Compliance: ``A tau = tau/(2 mu) - lambda/(2 mu (d lambda + 2 mu)) tr(tau) I``.
    """

    def __init__(self, subdomains: Iterable[Subdomain], dim: int):
        self.dim = dim
        self.subdomains = {s.id: s for s in subdomains}
        if not self.subdomains:
            raise ValueError("material needs at least one subdomain")
        for s in self.subdomains.values():
            if dim * s.lam + 2 * s.mu <= 0:
                raise ValueError(f"subdomain {s.id}: d*lambda + 2*mu must be positive")

    @classmethod
    def homogeneous(cls, dim: int, rho: float = 1.0, E: float = 1.0, nu: float = 0.35) -> "IsotropicMaterial":
        lam, mu = lame_from_E_nu(E, nu)
        return cls([Subdomain(0, rho, lam, mu)], dim)

    @classmethod
    def from_records(cls, records: Iterable[Mapping], dim: int) -> "IsotropicMaterial":
        """Build from ``{id, rho, E, nu}`` or ``{id, rho, lambda, mu}`` dicts."""
        subs = []
        for r in records:
            if "E" in r or "nu" in r:
                lam, mu = lame_from_E_nu(float(r["E"]), float(r["nu"]))
            else:
                lam, mu = float(r["lambda"]), float(r["mu"])
            subs.append(Subdomain(int(r.get("id", 0)), float(r.get("rho", 1.0)), lam, mu))
        return cls(subs, dim)

    def _get(self, subdomain: int) -> Subdomain:
        try:
            return self.subdomains[int(subdomain)]
        except KeyError:
            raise KeyError(f"no material record for subdomain {subdomain}") from None

    def apply_compliance(self, tau: np.ndarray, subdomain: int = 0) -> np.ndarray:
        s = self._get(subdomain)
        d = self.dim
        tau = np.asarray(tau, dtype=float)
        tr = np.trace(tau, axis1=-2, axis2=-1)
        coef = s.lam / (2 * s.mu * (d * s.lam + 2 * s.mu))
        return tau / (2 * s.mu) - coef * tr[..., None, None] * np.eye(d)

    def apply_stiffness(self, zeta: np.ndarray, subdomain: int = 0) -> np.ndarray:
        """Closed-form inverse of the compliance: ``2 mu zeta + lambda tr(zeta) I``."""
        s = self._get(subdomain)
        zeta = np.asarray(zeta, dtype=float)
        tr = np.trace(zeta, axis1=-2, axis2=-1)
        return 2 * s.mu * zeta + s.lam * tr[..., None, None] * np.eye(self.dim)

    def compliance_matrix(self, subdomain: int, sym_basis: np.ndarray) -> np.ndarray:
        """Matrix ``(A E_b) : E_a`` in a given symmetric-matrix basis."""
        AE = self.apply_compliance(sym_basis, subdomain)
        return np.einsum("aij,bij->ab", sym_basis, AE)

    def _eigs(self, s: Subdomain) -> tuple[float, float]:
        # trace-free part and multiples of I
        return 1.0 / (2 * s.mu), 1.0 / (self.dim * s.lam + 2 * s.mu)

    @property
    def a_minus(self) -> float:
        return min(min(self._eigs(s)) for s in self.subdomains.values())

    @property
    def a_plus(self) -> float:
        return max(max(self._eigs(s)) for s in self.subdomains.values())

    def rho(self, subdomain: int) -> float:
        return self._get(subdomain).rho

    def cell_density(self, mesh: Mesh) -> np.ndarray:
        return np.array([self.rho(s) for s in mesh.cell_subdomain])


def facet_density(mesh: Mesh, material: IsotropicMaterial) -> np.ndarray:
    """Facet weight: min of neighbour densities inside, cell density on Neumann facets.

    Dirichlet facets get NaN: they carry no DG terms.
    """
    rho = material.cell_density(mesh)
    out = np.full(mesh.n_facets, np.nan)
    c0, c1 = mesh.facet_cells[:, 0], mesh.facet_cells[:, 1]
    inner = mesh.facet_kind == INTERIOR
    out[inner] = np.minimum(rho[c0[inner]], rho[c1[inner]])
    neu = mesh.facet_kind == NEUMANN
    out[neu] = rho[c0[neu]]
    assert not np.any(np.isfinite(out[mesh.facet_kind == DIRICHLET]))
    return out
