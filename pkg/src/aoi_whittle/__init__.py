"""Whittle-index scheduling for age of information with stochastic arrivals."""

from .core import ArrivalProcess, Decision, NetworkState, sample_arrivals
from .dtmc import dtmc_average_cost, preaction_mean_age
from .mdp import (
    build_subproblem,
    discounted_value_iteration,
    extract_threshold,
    relative_value_iteration,
    solve_joint,
)
from .sim import SimReport, make_scheduler, run, step, whittle_decide
from .whittle import (
    IndexTable,
    SubproblemParams,
    average_cost,
    indexability_sweep,
    optimal_threshold,
    whittle_index,
)

__version__ = "0.1.0"
