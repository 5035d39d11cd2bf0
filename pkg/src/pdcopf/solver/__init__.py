"""Shared numerical engine: interior-point NLP/QP solver and KKT checks."""

from .ipm import (
    NlpProblem,
    SolveReport,
    SolverOptions,
    Status,
    check_kkt,
    quadratic_program,
    solve_ipm,
)
from .linalg import LdlFactor, SingularSystem

__all__ = [
    "LdlFactor",
    "NlpProblem",
    "SingularSystem",
    "SolveReport",
    "SolverOptions",
    "Status",
    "check_kkt",
    "quadratic_program",
    "solve_ipm",
]
