"""Exception types shared across the package."""

from __future__ import annotations


class InvlqrError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(InvlqrError):
    """Array arguments have inconsistent or invalid dimensions."""


class ConfigError(InvlqrError):
    """Invalid configuration value, unknown key, or unusable mode."""


class ParseError(InvlqrError):
    """A file could not be parsed (malformed JSON/CSV)."""


class ValidationError(InvlqrError):
    """A parsed file violates the documented schema."""


class IdentifiabilityError(InvlqrError):
    """Regression data is rank deficient; the model is not identifiable."""

    def __init__(self, message: str, rank: int | None = None):
        super().__init__(message)
        self.rank = rank


class ConditioningError(InvlqrError):
    """A matrix that must be inverted is numerically singular."""


class DivergenceError(InvlqrError):
    """Simulation produced a non-finite state."""

    def __init__(self, message: str, step: int, trajectory: int | None = None):
        super().__init__(message)
        self.step = step
        self.trajectory = trajectory


class SolverError(InvlqrError):
    """An iterative solver failed to converge."""

    def __init__(self, message: str, gradient_norm: float | None = None):
        super().__init__(message)
        self.gradient_norm = gradient_norm
