"""Eigenwise parallel augmented subspace eigensolver for elliptic problems."""

from .driver import RunReport, SolverConfig, solve
from .multigrid import MgConfig

__all__ = ["MgConfig", "RunReport", "SolverConfig", "solve"]
__version__ = "0.1.0"
