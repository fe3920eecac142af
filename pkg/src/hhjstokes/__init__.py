"""Stream-function discretisation of the Stokes problem with an HHJ-type stress.

The velocity is u_h = curl(psi_h), exactly divergence free, and the viscous
stress sigma_h is a trace-free matrix field with continuous normal-tangential
trace.  Pressure is recovered afterwards from the discrete stress.
"""
from .assembly import LinearSystem, assemble_a, assemble_b, assemble_gauge, assemble_load, assemble_system
from .cases import ManufacturedCase, gradient_case, reference_case
from .cli import StudyConfig, run_checks, run_study, solve_case
from .fespace import FEFunction, FESpace, UnisolvenceError
from .mesh import Mesh, build_structured
from .postprocess import ErrorReport, error_norms, recover_pressure, velocity_eval
from .quadrature import QuadratureRule, simplex_rule
from .solver import SolveReport, SolverError, solve

__version__ = "0.1.0"

__all__ = [
    "LinearSystem", "assemble_a", "assemble_b", "assemble_gauge", "assemble_load", "assemble_system",
    "ManufacturedCase", "gradient_case", "reference_case", "StudyConfig", "run_checks", "run_study",
    "solve_case", "FEFunction", "FESpace", "UnisolvenceError", "Mesh", "build_structured", "ErrorReport",
    "error_norms", "recover_pressure", "velocity_eval", "QuadratureRule", "simplex_rule", "SolveReport",
    "SolverError", "solve",
]
