"""Minimax Q-estimation solvers and the fitted-Q baseline."""

from .algorithms import (
    SolverConfig,
    SolveResult,
    fqi_solve,
    mqp_solve,
    msqp_solve,
    population_solve,
)
from .losses import (
    empirical_lagrangian,
    inner_max_box,
    lagrangian_tuples,
    outer_objective,
    population_lagrangian,
    residual,
    residual_hard,
    residual_soft,
    residual_tuples,
)
from .outer import SolverError

__all__ = [
    "SolveResult",
    "SolverConfig",
    "SolverError",
    "empirical_lagrangian",
    "fqi_solve",
    "inner_max_box",
    "lagrangian_tuples",
    "mqp_solve",
    "msqp_solve",
    "outer_objective",
    "population_lagrangian",
    "population_solve",
    "residual",
    "residual_hard",
    "residual_soft",
    "residual_tuples",
]
