"""Exception types shared across the package."""


class TwoScaleError(Exception):
    """Base class for package errors."""


class ConfigError(TwoScaleError):
    """Invalid experiment configuration (unknown keys, bad values, budget)."""


class UnstableStepError(TwoScaleError):
    """Requested time step exceeds the explicit-scheme stability bound."""


class DivergedError(TwoScaleError):
    """A simulated state became non-finite."""

    def __init__(self, message, step=None, path=None):
        super().__init__(message)
        self.step = step
        self.path = path


class MethodError(TwoScaleError):
    """Operation unsupported for the representation's build method."""


class FamilyMismatchError(TwoScaleError):
    """Value comparison requested across different standard-law families."""
