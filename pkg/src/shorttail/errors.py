"""Exception types raised by the estimators and tools."""


class ShortTailError(Exception):
    """Base class for every error raised by this package."""


class EstimationError(ShortTailError):
    """A numerical or statistical procedure could not produce a value."""


class DomainError(EstimationError, ValueError):
    """An argument lies outside the domain where the operation is defined."""


class DegenerateSampleError(EstimationError):
    """The sample carries too little variation (e.g. tied top order statistics)."""


class ConvergenceError(EstimationError):
    """An optimiser failed to locate a feasible stationary point."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ExtrapolationError(EstimationError):
    """Extrapolation requested in the wrong direction or from an invalid anchor."""


class InfiniteEndpointError(EstimationError):
    """The fitted tail index is nonnegative, so the right endpoint is infinite."""


class DataError(ShortTailError):
    """Input data could not be parsed or failed validation."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(ShortTailError):
    """Invalid command-line or JSON configuration."""
