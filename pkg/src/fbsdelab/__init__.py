"""Numerical laboratory for coupled forward-backward systems at small noise.

The package solves the decoupling field of a coupled forward-backward pair on
a truncated grid, simulates the decoupled dynamics with reproducible
counter-based noise, estimates the moment bounds and convergence statements
of the small-noise limit, and compares rare-event probabilities against
minimized action functionals.
"""

from .errors import (BranchError, ConfigError, ContractionError, CouplingError,
                     DivergenceError, EmptyEstimateError, EvaluationError,
                     ExcursionError, FbsdeLabError, IterationError, ShapeError,
                     ShootingError)
from .problems import (CoefficientSet, ProblemSpec, REGISTRY, SampleBox,
                       build_problem, check_growth_and_ellipticity,
                       check_monotonicity, estimate_lipschitz)
from .limits import (OdeSolution, limit_u, modulus_fit, solve_bvp_picard,
                     solve_bvp_shooting)
from .pdefield import (DecouplingField, FieldBank, SpaceTimeGrid,
                       discrete_residual, field_bounds, field_gap, limit_field,
                       make_grid, solve_parabolic)
from .simulate import (TrajectoryBundle, backward_residual,
                       estimate_u_probabilistic, simulate_forward)
from .asymptotics import (ConditionalVariation, EnsembleStat, RateFit,
                          SweepRow, conditional_variation, coupled_gap_moments,
                          deviation_stats, epsilon_gap_moments, fit_rate,
                          meyer_zheng_distance, meyer_zheng_sweep,
                          second_moments, second_moment_stats,
                          sup_deviation_probability,
                          sweep_conditional_variation, time_shift_moments,
                          uniformity_ratio, x_lipschitz_moments)
from .ldp import (ActionBreakdown, BackwardAction, MinimizedPath, TubeEstimate,
                  action_backward, action_forward, control_from_path,
                  minimize_action_endpoint, minimize_action_tube,
                  sweep_tube_probability, tube_probability)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
