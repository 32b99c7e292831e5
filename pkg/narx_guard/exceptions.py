"""Errors raised by the NARX guard package."""

from __future__ import annotations


class NarxGuardError(Exception):
    """General NARX guard error."""


class DimensionError(NarxGuardError, ValueError):
    """Array dimensions do not agree."""


class DomainError(NarxGuardError, ValueError):
    """Argument outside its mathematical domain."""


class NumericalError(NarxGuardError, ArithmeticError):
    """Numerical routine failed to converge or produced non-finite values."""


class TrainingDivergedError(NumericalError):
    """Training loss became non-finite."""


class WeightFileError(NarxGuardError):
    """Weight or dataset file does not match its schema."""

    def __init__(self, message: str, field: str = "") -> None:
        """Initialize with the offending field path."""
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class BackendUnavailableError(NarxGuardError):
    """Requested solver backend is unknown or not installed."""


class SolverError(NarxGuardError):
    """Solver failed or its certificate was rejected."""

    def __init__(self, message: str, status: str = "error") -> None:
        """Initialize with the solver status."""
        super().__init__(message)
        self.status = status


class ConfigError(NarxGuardError):
    """Experiment configuration is invalid."""


class IntegrityError(NarxGuardError):
    """Stored results do not match their raw files."""
