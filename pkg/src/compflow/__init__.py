"""compflow: simulation and verification toolkit for compositional gradient
flows with a fast-slow scale separation.

The package simulates the coupled two-scale diffusion associated with
stochastic compositional optimization, its averaged and gradient-flow
limits, the discrete two-time-scale iteration, and the Gaussian limit of
the rescaled deviation between the coupled and averaged slow motions, plus
a Monte Carlo harness that verifies the expected convergence rates.
"""

__version__ = "0.1.0"

from .errors import (
    CompflowError,
    ConfigurationError,
    DivergenceError,
    GridAlignmentError,
    NotPSDError,
)

__all__ = [
    "__version__",
    "CompflowError",
    "ConfigurationError",
    "DivergenceError",
    "GridAlignmentError",
    "NotPSDError",
]
