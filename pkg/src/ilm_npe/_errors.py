"""Exception types shared across the package."""


class IlmError(Exception):
    """Base class for package errors."""


class InvalidPopulationError(IlmError, ValueError):
    pass


class SingularDistanceError(IlmError, ValueError):
    """Two individuals share exact coordinates, so d_ij^-beta is undefined."""


class InvalidTrajectoryError(IlmError, ValueError):
    pass


class ConfigError(IlmError, ValueError):
    pass


class NumericalError(IlmError, FloatingPointError):
    """Training or sampling produced non-finite values."""


class OutOfDistributionWarning(UserWarning):
    """Too few posterior draws fell inside the prior support."""
