"""Integrated prediction and multi-period portfolio optimization.

The allocation program is solved by entropic mirror descent and differentiated
through its fixed point, so a return predictor can be trained on realized
portfolio outcomes. See ``ipmo.cli`` for the command-line entry point.
"""
from .core import AllocationPath, CovariancePath, ForecastPath, ProblemParams, RealizedPanel
from .errors import IPMOError
from .mdfp import NeumannConfig, implicit_vjp
from .solver import SolverConfig, solve_fixed_point

__version__ = "0.1.0"

__all__ = [
    "AllocationPath", "CovariancePath", "ForecastPath", "IPMOError", "NeumannConfig", "ProblemParams",
    "RealizedPanel", "SolverConfig", "implicit_vjp", "solve_fixed_point", "__version__",
]
