"""Homogenization of thin domains with oscillating roofs.

Cell problems on representative cells give the effective coefficients of a
1D limit problem; a first-order corrector built from the cell solutions is
compared against full finite-element solves on the thin domains.
"""
from .errors import (
    CellSolveError,
    ConfigError,
    ConvergenceError,
    ExprDomainError,
    ExprSyntaxError,
    HypothesisViolation,
    MeshBudgetError,
    MeshQualityError,
    PeriodicityError,
    StageError,
    ThinHomogError,
)
from .profile import ProfileSpec, parse, validate
from .homog import CoefficientTable, SourceSpec, build_table, solve_homog
from .corrector import error_report
from .study import StudyConfig, load_config, parse_config, run_study

__version__ = "0.1.0"
