"""Exception hierarchy shared by all modules."""


class BilevelOTError(Exception):
    """Base class for errors raised by this package."""


class NonCommensurateRho(BilevelOTError, ValueError):
    pass


class GridMismatch(BilevelOTError, ValueError):
    pass


class SupportTooWide(BilevelOTError, ValueError):
    """Mollification would push mass past the domain boundary."""


class MassMismatch(BilevelOTError, ValueError):
    pass


class MarginalMismatch(BilevelOTError, ValueError):
    pass


class InvalidBeta(BilevelOTError, ValueError):
    pass


class InvalidExponent(BilevelOTError, ValueError):
    pass


class InvalidRatio(BilevelOTError, ValueError):
    pass


class EmptyMask(BilevelOTError, ValueError):
    pass


class ConfigError(BilevelOTError, ValueError):
    """Bad CLI flag or instance file; ``field`` names the culprit."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class NoConvergence(BilevelOTError, RuntimeError):
    """Iterative solver hit its budget. ``trace`` holds per-iteration residuals."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class NoProgress(BilevelOTError, RuntimeError):
    """Outer search stalled above the stationarity tolerance.

    The best point found is available as ``result``.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class IoError(BilevelOTError, OSError):
    """Report or instance file could not be read or written."""
