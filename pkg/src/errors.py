"""
Error types for the transition-loss toolkit.
Each failure named by an operation contract maps to one class here, so callers
(and the CLI exit-code table) can tell families apart.
"""

from typing import Optional


class TransitionLossError(Exception):
    """Base class for all toolkit errors."""


class SpanError(TransitionLossError, ValueError):
    """Empty, reversed or out-of-range entity span."""


class VocabularyError(TransitionLossError, ValueError):
    """Token id outside the vocabulary or colliding with a reserved id."""


class TargetIndexError(TransitionLossError, IndexError):
    """Class index outside [0, K)."""


class ShapeError(TransitionLossError, ValueError):
    """Mismatched array shapes or class counts."""


class NumericError(TransitionLossError, ArithmeticError):
    """Non-finite value where a finite one is required."""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class DegeneratePosteriorError(TransitionLossError, ArithmeticError):
    """E-step normalizer C is zero."""


class DegenerateRowError(TransitionLossError, ArithmeticError):
    """Transition row of the observed label sums to zero."""


class ConstraintError(TransitionLossError, ValueError):
    """Flow constraint cannot be applied (all-zero w)."""


class InversionError(TransitionLossError, ArithmeticError):
    """Planar step could not be inverted."""


class ProjectionError(TransitionLossError, ValueError):
    """Norm projection of a zero vector."""


class MetricError(TransitionLossError, ValueError):
    """Metric undefined for the given ranking."""


class ConfigError(TransitionLossError, ValueError):
    """Invalid configuration values."""


class DatasetParseError(TransitionLossError, ValueError):
    """Malformed dataset line."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class DatasetSchemaError(TransitionLossError, ValueError):
    """Dataset record with a missing or invalid field."""

    def __init__(self, message: str, field: str, line_number: Optional[int] = None):
        prefix = f"line {line_number}: " if line_number is not None else ""
        super().__init__(f"{prefix}field '{field}': {message}")
        self.field = field
        self.line_number = line_number


class CheckpointError(TransitionLossError, IOError):
    """Unreadable, truncated or incompatible checkpoint."""


class InvariantViolation(TransitionLossError, AssertionError):
    """A training step wrote parameters it must not touch."""
