"""Exception types shared across the package.

Every error raised on a user-facing path derives from ``RidgeRelayError``
so callers (and the command line driver) can map failures to exit codes
without matching on message text.
"""

from __future__ import annotations

__all__ = [
    "RidgeRelayError",
    "ValidationError",
    "RegistryError",
    "SingularMatrixError",
    "ConvergenceError",
    "SelectionError",
    "EstimationError",
    "StateFileError",
    "LockError",
]


class RidgeRelayError(Exception):
    """Base class for all package errors."""


class ValidationError(RidgeRelayError):
    """An input violates a documented precondition (shape, finiteness, range)."""


class RegistryError(ValidationError):
    """A covariate name is unknown, duplicated, or inconsistent with the registry."""


class SingularMatrixError(RidgeRelayError):
    """A linear system that must be positive definite is numerically singular."""


class ConvergenceError(RidgeRelayError):
    """An iterative fit stopped without meeting its convergence criterion.

    Carries the last iterate so callers can inspect how far the solver got.
    """

    def __init__(self, message: str, last_coef=None, gradient_norm: float | None = None,
                 iterations: int | None = None):
        super().__init__(message)
        self.last_coef = last_coef
        self.gradient_norm = gradient_norm
        self.iterations = iterations


class SelectionError(RidgeRelayError):
    """Penalty selection could not produce a usable choice (e.g. all scores infinite)."""


class EstimationError(RidgeRelayError):
    """A baseline estimator failed at every configuration it was allowed to try."""


class StateFileError(RidgeRelayError):
    """A state file is missing, unreadable, or has an unsupported schema."""


class LockError(RidgeRelayError):
    """Another process holds the advisory lock for a state file."""
