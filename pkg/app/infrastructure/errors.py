from typing import Optional


class LangevinError(Exception):
    """Base class for every error raised by the library."""


class OnDiscontinuity(LangevinError, ValueError):
    """A point lies exactly on a discontinuity surface."""

    def __init__(self, message: str, surface: Optional[int] = None):
        super().__init__(message)
        self.surface = surface


class NonFinite(LangevinError, ArithmeticError):
    """A chain produced NaN or Inf, usually because the stepsize is too large."""

    def __init__(self, message: str, step: Optional[int] = None, chain: str = ""):
        super().__init__(message)
        self.step = step
        self.chain = chain


class OutOfRange(LangevinError, ValueError):
    pass


class OutOfDomain(LangevinError, ValueError):
    pass


class NumericalUnderflow(LangevinError, ArithmeticError):
    pass


class DimensionMismatch(LangevinError, ValueError):
    pass


class MissingCheckpoints(LangevinError, ValueError):
    pass


class NonPositiveValue(LangevinError, ValueError):
    pass


class ReferenceUnavailable(LangevinError):
    pass


class InsufficientBurnIn(LangevinError):
    pass


class ReferenceInconsistent(LangevinError):
    pass


class StepsizeGuardError(LangevinError, ValueError):
    pass


class ConfigError(LangevinError, ValueError):
    """Config file could not be parsed or validated."""

    def __init__(
        self,
        message: str,
        line: Optional[int] = None,
        column: Optional[int] = None,
    ):
        location = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{location}")
        self.line = line
        self.column = column
