"""Optimal exploitation of a stochastic logistic resource with harvesting
impulses and delayed renewal orders: grid solver, strategy extraction and
Monte Carlo validation."""

from .model import (ModelParams, State, ParamError, baseline_params, validate_params,
                    logistic_step_deterministic, logistic_sample_path, gbm_step,
                    liquidation, sale_gain, path_rng)
from .impulse import (Schedule, PendingOrders, Strategy, harvest_op, renew_op,
                      mature_op, date_count, pending_window, profitable_filter)
from .chain import GridSpec, GeneratorRow, Generator, SolverError, build_grid, \
    generator_stencil, implicit_step, interpolate
from .solver import (CONTINUE, HARVEST, PLANT, PLANT_AND_HARVEST, ValueField,
                     RegionMap, SolveResult, discrete_harvest_sup, terminal_slice,
                     date_jump, qvi_interval_solve, solve)
from .policy_sim import (Action, SimReport, extract_action, simulate, dpp_check,
                         region_metrics, replay_strategy)

__version__ = "0.1.0"
