"""Exception types shared across the package."""


class VTRegError(Exception):
    """Base class for all package errors."""


class ConfigError(VTRegError, ValueError):
    """Invalid configuration value or incompatible sizes."""


class InvalidParameterError(VTRegError, ValueError):
    """A numeric parameter is out of its legal domain (e.g. non-finite theta)."""


class InvalidArgumentError(VTRegError, ValueError):
    """Mismatched shapes or otherwise malformed inputs."""


class SingularMatrixError(VTRegError, ValueError):
    pass


class UndefinedStatisticError(VTRegError, ValueError):
    """Statistic is undefined for the input (e.g. zero variance)."""


class ValidationError(VTRegError, ValueError):
    """Manifest / data validation failure. ``offenders`` lists the bad entries."""

    def __init__(self, message: str, offenders=None):
        super().__init__(message)
        self.offenders = list(offenders or [])


class DataError(VTRegError, IOError):
    """Unreadable or corrupt input data."""


class NumericalAbort(VTRegError, RuntimeError):
    """Raised by the training loop when a loss goes non-finite or explodes.

    ``snapshot`` carries the offending inputs, theta and loss components.
    """

    def __init__(self, message: str, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
