"""Gradient-flow laboratory for layerwise linear models."""
from .analytic import (
    ModeTrajectoryParams,
    balanced_transition,
    correlation_spectrum,
    gamma_at,
    gamma_solution,
    linear_mode,
    reconstruct_params,
    decoupled_mode,
    sigmoidal_crossing_time,
    sigmoidal_mode,
    stage_like_schedule,
)
from .core import (
    Family,
    InputStatistics,
    ModelSpec,
    ParamState,
    TargetSpec,
    conserved_quantity,
    gradient,
    lambda_balanced_init,
    loss,
)
from .errors import LinflowError
from .integrator import Adam, FlowConfig, Trajectory, discrete_gd, integrate

__version__ = "0.1.0"

__all__ = [
    "ModeTrajectoryParams",
    "balanced_transition",
    "correlation_spectrum",
    "gamma_at",
    "gamma_solution",
    "linear_mode",
    "reconstruct_params",
    "decoupled_mode",
    "sigmoidal_crossing_time",
    "sigmoidal_mode",
    "stage_like_schedule",
    "Family",
    "InputStatistics",
    "ModelSpec",
    "ParamState",
    "TargetSpec",
    "conserved_quantity",
    "gradient",
    "lambda_balanced_init",
    "loss",
    "LinflowError",
    "Adam",
    "FlowConfig",
    "Trajectory",
    "discrete_gd",
    "integrate",
]
