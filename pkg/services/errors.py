# Errors — one exception type per failure named by the forecasting engine.
# Each one also derives from the closest builtin so callers can catch generically.

from typing import Optional


class EarthError(Exception):
    """Base class for every error raised by the engine."""


class DimensionError(EarthError, ValueError):
    pass


class NumericError(EarthError, ArithmeticError):
    pass


class ContractError(EarthError, ValueError):
    pass


class ConfigError(EarthError, ValueError):
    pass


class InsufficientDataError(EarthError, ValueError):
    pass


class OrderingError(EarthError, ValueError):
    pass


class DomainError(EarthError, ValueError):
    pass


class FormatError(EarthError, ValueError):
    """Malformed input file. `line` is 1-based and counts the header."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DivergenceError(NumericError):
    """Non-finite solver state. `step` is the index of the offending step."""

    def __init__(self, step: int, message: str = "non-finite state"):
        self.step = step
        super().__init__(f"{message} at solver step {step}")


class TrainingAborted(EarthError, RuntimeError):
    """
    Training stopped on a numeric failure.
    `checkpoint` holds the last good state so the run is never lost.
    """

    def __init__(self, message: str, checkpoint=None, parameter: Optional[str] = None):
        self.checkpoint = checkpoint
        self.parameter  = parameter
        super().__init__(message)
