"""Stochastic multi-region SEIRD epidemics with unscented Kalman filtering
and Fish School Search maximum-likelihood estimation."""

__version__ = "0.1.0"

from .core import (
    COMPARTMENTS,
    EpiParams,
    EpsilonSet,
    ObservationRecord,
    RegionMeta,
    TestParams,
    Trajectory,
    gravity_coupling,
    gravity_weights,
    observe_mean,
    seeded_initial_state,
    simulate,
    step_mean,
    step_stochastic,
)
from .errors import ConfigError, DataError, FilterError, ModelError
from .estimate import FitResult, FssConfig, ParamSpec, fit, fss_optimize
from .ukf import FilterResult, filter_series

__all__ = [
    "COMPARTMENTS", "EpiParams", "EpsilonSet", "ObservationRecord", "RegionMeta", "TestParams", "Trajectory",
    "gravity_coupling", "gravity_weights", "observe_mean", "seeded_initial_state", "simulate", "step_mean",
    "step_stochastic", "ConfigError", "DataError", "FilterError", "ModelError", "FitResult", "FssConfig",
    "ParamSpec", "fit", "fss_optimize", "FilterResult", "filter_series",
]
