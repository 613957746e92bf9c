"""Exact weighted-shift construction with a sharp epsilon-hypercyclicity threshold."""
from .constructor import Construction, construct
from .orbit import apply_T, orbit_at, reset_trace
from .schedule import ConfigError, Params, Schedule
from .space import DyadicScalar, HVector, ZVector
from .verify import lower_experiment, threshold_scan, upper_experiment

__all__ = [
    "Construction",
    "ConfigError",
    "DyadicScalar",
    "HVector",
    "Params",
    "Schedule",
    "ZVector",
    "apply_T",
    "construct",
    "lower_experiment",
    "orbit_at",
    "reset_trace",
    "threshold_scan",
    "upper_experiment",
]
