"""Exception hierarchy shared by every clvm module."""


class ClvmError(Exception):
    """Base class for all package errors."""


class DimensionError(ClvmError, ValueError):
    """Shapes disagree or a matrix violates a structural precondition."""


class FactorizationError(ClvmError, ArithmeticError):
    """A Cholesky factorization failed even after the jitter ladder."""


class ConditioningError(ClvmError, ArithmeticError):
    """The observed block of a Gaussian is singular."""


class IntegrationError(ClvmError, ArithmeticError):
    """Adaptive quadrature did not reach the requested tolerance."""


class ParseError(ClvmError, ValueError):
    """Malformed CSV input."""


class MissingDataError(ClvmError, ValueError):
    """Missing entries were passed to a complete-data routine."""


class DivergenceError(ClvmError, ArithmeticError):
    """An objective or gradient became non-finite during optimization."""


class ConfigError(ClvmError, ValueError):
    """Invalid run configuration."""
