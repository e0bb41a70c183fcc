"""Exception types raised by the incrt package."""


class DimensionError(ValueError):
    """Array shapes do not agree."""


class DegenerateSpectrumError(ValueError):
    """Both spectral gaps vanish, so the gate balance is undefined."""


class PreconditionError(ValueError):
    """An operation was called outside its stated preconditions."""


class StepSizeError(FloatingPointError):
    """A probe update collapsed to the zero vector."""


class ConvergenceError(RuntimeError):
    """Gate iteration hit its step budget before reaching tolerance."""

    def __init__(self, message, deviation, steps):
        super().__init__(message)
        self.deviation = deviation
        self.steps = steps


class SaturationError(RuntimeError):
    """The captured basis already spans the whole feature space."""
