"""Symmetric-stress discontinuous Galerkin eigensolver for linear elasticity.

The natural frequencies are ``omega = sqrt(kappa - 1)`` where ``kappa`` solves the
generalized eigenproblem ``a_h(sigma, tau) = kappa (A sigma, tau)`` on fully
discontinuous symmetric tensor fields of degree ``k``.
"""

__version__ = "0.1.0"

from .analysis import (
    RateStudy,
    convergence_rates,
    infsup_constant,
    recover_displacement,
    run_rate_study,
    spurious_scan,
)
from .assembly import (
    AssembledForms,
    PenaltyConfig,
    assemble_a_h,
    assemble_c_h,
    assemble_mass,
    dg_norm,
    penalty_lower_bound,
    trace_constant,
)
from .eigen import SpectrumResult, filter_spectrum, solve, solve_dense, solve_shift_invert
from .fem import DGSpace
from .material import IsotropicMaterial, lame_from_E_nu
from .mesh import Mesh, barycentric_refine, generate_disk, generate_structured, perturb_interior, read_mesh
from .problems import Problem, SolverSettings

__all__ = [
    "AssembledForms",
    "DGSpace",
    "IsotropicMaterial",
    "Mesh",
    "PenaltyConfig",
    "Problem",
    "RateStudy",
    "SolverSettings",
    "SpectrumResult",
    "assemble_a_h",
    "assemble_c_h",
    "assemble_mass",
    "barycentric_refine",
    "convergence_rates",
    "dg_norm",
    "filter_spectrum",
    "generate_disk",
    "generate_structured",
    "infsup_constant",
    "lame_from_E_nu",
    "penalty_lower_bound",
    "perturb_interior",
    "read_mesh",
    "recover_displacement",
    "run_rate_study",
    "solve",
    "solve_dense",
    "solve_shift_invert",
    "spurious_scan",
    "trace_constant",
]
