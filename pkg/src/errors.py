#!/usr/bin/env python3
"""
Error Types for the CoFInAl Scoring Head

Every failure raised by the library derives from CoFInAlError so the
command-line front end can map it to an exit status. Each subclass also
derives from the closest builtin exception, so callers catching
ValueError or ArithmeticError keep working.
"""

from typing import Optional


class CoFInAlError(Exception):
    """Base class for all library errors."""


class DimensionError(CoFInAlError, ValueError):
    """Tensor shapes do not conform for an operation."""


class ConfigError(CoFInAlError, ValueError):
    """A configuration value is outside its valid range."""


class ConfigParseError(ConfigError):
    """The configuration document or an override could not be parsed."""


class InfeasibleRotationError(ConfigError):
    """An orthonormal d x K frame was requested with d < K."""


class LabelError(CoFInAlError, ValueError):
    """A class index lies outside the valid label range."""


class ScoreRangeError(CoFInAlError, ValueError):
    """A score lies outside the configured score range."""


class DegeneratePrototypeError(CoFInAlError, ValueError):
    """A grade prototype has zero norm and cannot be normalized."""


class UndefinedCorrelationError(CoFInAlError, ValueError):
    """A rank correlation was requested for a constant batch."""


class EvaluationError(CoFInAlError, ArithmeticError):
    """A function under gradient check produced a non-finite value."""


class NonFiniteError(CoFInAlError, ArithmeticError):
    """A forward value or training loss became NaN or infinite."""

    def __init__(self, message: str, epoch: Optional[int] = None, batch: Optional[int] = None):
        """
        Args:
            message: Description of the failure
            epoch: Epoch index at which it occurred, if known
            batch: Batch index within the epoch, if known
        """
        context = []
        if epoch is not None:
            context.append(f"epoch={epoch}")
        if batch is not None:
            context.append(f"batch={batch}")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class FeatureFormatError(CoFInAlError, ValueError):
    """A feature file is malformed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class CheckpointError(CoFInAlError, ValueError):
    """A checkpoint file is malformed, corrupted or of an unsupported version."""
