"""Stochastic variational message passing for Gaussian matrix factorization."""

from .expfam import GaussianNatural, Moments
from .model import FactorAddress, FactorState, Side
from .data import RunLogEntry, SparseRatings, generate_synthetic, load_ratings
from .optimizer import RunConfig, RunLog, ScheduleParams, init_state, run

__version__ = "0.1.0"

__all__ = [
    "GaussianNatural",
    "Moments",
    "FactorAddress",
    "FactorState",
    "Side",
    "SparseRatings",
    "RunLogEntry",
    "generate_synthetic",
    "load_ratings",
    "RunConfig",
    "RunLog",
    "ScheduleParams",
    "init_state",
    "run",
]
