"""Problem descriptions: mesh recipe, material, degree, penalty and solver settings."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .assembly import AssembledForms, PenaltyConfig, assemble_a_h
from .eigen import DEFAULT_CLUSTER_TOL, DEFAULT_DENSE_CAP, DEFAULT_SHIFT_DELTA, SpectrumResult, solve_dense, solve_shift_invert
from .fem import DGSpace
from .material import IsotropicMaterial
from .mesh import (
    Mesh,
    barycentric_refine,
    generate_disk,
    generate_structured,
    perturb_interior,
    read_mesh,
    side_predicate,
    tag_boundary,
)

DOMAINS = ("square", "cube", "disk", "file")


@dataclass(frozen=True)
class SolverSettings:
    nev: int = 6
    dense_cap: int = DEFAULT_DENSE_CAP
    cluster_tol: float = DEFAULT_CLUSTER_TOL
    shift_delta: float = DEFAULT_SHIFT_DELTA
    method: str = "auto"  # auto | dense | shift_invert
    backend: str = "auto"
    count_kernel: bool = False


@dataclass(frozen=True)
class Problem:
    """One eigenproblem configuration.

    ``n`` is the number of cells per side of the structured base mesh (rings for the
    disk). ``perturb`` moves interior vertices by up to ``perturb / n``. ``dirichlet`` lists
    the sides ("x0", "y1", ...) carrying the Dirichlet condition, or ``("all",)``.
    """

    domain: str = "square"
    n: int = 4
    barycentric: bool = False
    perturb: float = 0.0
    seed: int = 0
    dirichlet: tuple[str, ...] = ("all",)
    mesh_file: str | None = None
    materials: tuple[dict, ...] = ({"id": 0, "rho": 1.0, "E": 1.0, "nu": 0.35},)
    k: int = 1
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}; expected one of {DOMAINS}")
        if self.k < 1:
            raise ValueError("polynomial degree k must be >= 1")
        if self.domain != "file" and self.n < 1:
            raise ValueError("n must be >= 1")
        if self.domain == "file" and not self.mesh_file:
            raise ValueError("domain 'file' needs mesh_file")

    @property
    def dim(self) -> int:
        if self.domain == "cube":
            return 3
        if self.domain == "file":
            return self.mesh().dim
        return 2

    def replace(self, **changes) -> "Problem":
        return dataclasses.replace(self, **changes)

    def with_a0(self, a0: float) -> "Problem":
        return self.replace(penalty=dataclasses.replace(self.penalty, a0=a0))

    def mesh(self) -> Mesh:
        if self.domain == "file":
            base = read_mesh(self.mesh_file)
        elif self.domain == "disk":
            base = generate_disk(self.n)
        else:
            base = generate_structured(self.n, 3 if self.domain == "cube" else 2)
        if self.perturb:
            base = perturb_interior(base, self.perturb / self.n, self.seed)
        if self.domain in ("square", "cube"):
            base = tag_boundary(base, side_predicate(self.dirichlet))
        mesh = barycentric_refine(base) if self.barycentric else base
        ids = {int(r.get("id", 0)) for r in self.materials}
        missing = set(np.unique(mesh.cell_subdomain).tolist()) - ids
        if missing:
            raise ValueError(f"no material record for subdomain(s) {sorted(missing)}")
        return mesh

    def material(self, dim: int | None = None) -> IsotropicMaterial:
        return IsotropicMaterial.from_records(self.materials, dim or self.dim)

    def forms(self, mesh: Mesh | None = None) -> AssembledForms:
        mesh = mesh or self.mesh()
        return assemble_a_h(DGSpace(mesh, self.k), self.material(mesh.dim), self.penalty)

    def solve(self, forms: AssembledForms | None = None, nev: int | None = None) -> SpectrumResult:
        """Solve on given forms, or assemble them here (and let the sparse solver free them)."""
        owned = forms is None
        forms = forms or self.forms()
        s = self.solver
        nev = nev or s.nev
        method = s.method
        if method == "auto":
            method = "dense" if forms.total_dofs <= s.dense_cap else "shift_invert"
        if method == "dense":
            return solve_dense(forms, nev=nev, dense_cap=s.dense_cap, cluster_tol=s.cluster_tol)
        if method == "shift_invert":
            return solve_shift_invert(
                forms,
                nev=nev,
                cluster_tol=s.cluster_tol,
                shift_delta=s.shift_delta,
                backend=s.backend,
                count_kernel=s.count_kernel,
                release_stiffness=owned,
            )
        raise ValueError(f"unknown solver method {method!r}")


def homogeneous(rho: float = 1.0, E: float = 1.0, nu: float = 0.35) -> tuple[dict, ...]:
    return ({"id": 0, "rho": rho, "E": E, "nu": nu},)


def as_sides(value: str | Sequence[str]) -> tuple[str, ...]:
    if isinstance(value, str):
        return tuple(s.strip() for s in value.split(",") if s.strip())
    return tuple(value)
