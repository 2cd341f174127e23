"""Time-varying severity rate estimation by regularized Poisson deconvolution."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    CountSeries,
    DelayDistribution,
    SeverityCurve,
    discretized_gamma,
    point_mass,
)
from .solver import (  # noqa: E402
    DeconvSpec,
    FitResult,
    lambda_max_bound,
    solve_gaussian,
    solve_realtime,
    solve_retrospective,
)

__all__ = [
    "CountSeries",
    "DeconvSpec",
    "DelayDistribution",
    "FitResult",
    "SeverityCurve",
    "discretized_gamma",
    "lambda_max_bound",
    "point_mass",
    "solve_gaussian",
    "solve_realtime",
    "solve_retrospective",
]
