"""Differential privacy analysis and privacy-preserving controller design
for discrete-time linear systems."""

from .exceptions import (
    DimensionError,
    DpsysError,
    InfeasibleError,
    NumericalError,
    RankDeficiencyError,
    UnstableSystemError,
    ValidationError,
)
from .linsys import ContinuousStateSpace, StateSpace, dare, simulate, zoh_discretize

__version__ = "0.1.0"

__all__ = [
    "ContinuousStateSpace",
    "DimensionError",
    "DpsysError",
    "InfeasibleError",
    "NumericalError",
    "RankDeficiencyError",
    "StateSpace",
    "UnstableSystemError",
    "ValidationError",
    "dare",
    "simulate",
    "zoh_discretize",
]
