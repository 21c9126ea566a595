"""Exception types shared across the package."""

from __future__ import annotations


class FlexselError(Exception):
    """Base class for library-specific failures."""


class DimensionError(FlexselError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigurationError(FlexselError, ValueError):
    """A config object, weight set, or run setup is internally inconsistent."""


class CapacityError(FlexselError, ValueError):
    """An input exceeds a scorer's context limit."""


class DegenerateDataError(FlexselError, ValueError):
    """Input carries no usable variance for the requested statistic."""


class EvaluationError(FlexselError, ArithmeticError):
    """A function produced a non-finite value where a finite one is required."""


class TrainingDivergenceError(FlexselError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite loss at optimizer step {step}")


class WeightFormatError(FlexselError, ValueError):
    """A weight file is malformed, truncated, or of an unsupported version."""
