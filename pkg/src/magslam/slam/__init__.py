"""Batch MAP solver: problem definition, residuals, Levenberg-Marquardt."""

from .problem import HyperMode, OdometryNoise, Problem, StatePrior, ZeroPositionPrior, align_epochs
from .residuals import Layout, ResidualSet, build_residuals
from .lm import LMResult, levenberg_marquardt
from .solver import Solution, SolverDivergedError, SolverOptions, solve

__all__ = [
    "HyperMode", "OdometryNoise", "Problem", "StatePrior", "ZeroPositionPrior", "align_epochs",
    "Layout", "ResidualSet", "build_residuals", "LMResult", "levenberg_marquardt",
    "Solution", "SolverDivergedError", "SolverOptions", "solve",
]
