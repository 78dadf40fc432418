"""Exception types shared across the toolkit."""


class CompflowError(Exception):
    """Base class for toolkit errors."""


class ConfigurationError(CompflowError):
    """A run or operation was configured inconsistently (missing oracle,
    missing sample budget, node cap exceeded, missing recorded increments,
    malformed config file)."""


class DivergenceError(CompflowError):
    """A simulated state became non-finite.

    Attributes carry the first bad time (continuous schemes) or iteration
    index (discrete schemes).
    """

    def __init__(self, message, when=None):
        super().__init__(message)
        self.when = when


class NotPSDError(CompflowError):
    """A matrix required to be positive semidefinite has an eigenvalue
    below tolerance; the offending eigenvalue is reported."""

    def __init__(self, message, eigenvalue=None):
        super().__init__(message)
        self.eigenvalue = eigenvalue


class GridAlignmentError(CompflowError):
    """Two trajectories expected on identical time grids do not align."""
