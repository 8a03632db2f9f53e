"""Layer-wise width scheduling for decoder-only transformers.

Per-layer head and FFN width schedules, parameter budgets, a small
heterogeneous transformer, and a training loop for desk-scale comparisons.
"""

__version__ = "0.1.0"

from .budget import ModelConfig, ParamBreakdown, Skeleton, count_params, equalize_budget
from .errors import (
    InfeasibleBudgetError,
    InsufficientDataError,
    InvalidArgumentError,
    InvalidExperimentError,
    InvalidInputError,
    LWSError,
    TrainingDivergenceError,
)
from .profiles import Kind, LayerProfile, ScalingSpec, build_layer_profiles

__all__ = [
    "InfeasibleBudgetError",
    "InsufficientDataError",
    "InvalidArgumentError",
    "InvalidExperimentError",
    "InvalidInputError",
    "Kind",
    "LWSError",
    "LayerProfile",
    "ModelConfig",
    "ParamBreakdown",
    "ScalingSpec",
    "Skeleton",
    "TrainingDivergenceError",
    "build_layer_profiles",
    "count_params",
    "equalize_budget",
]
