"""Exception hierarchy shared across the package."""


class BorderwatchError(Exception):
    """Base class for all package errors."""


class ConfigurationError(BorderwatchError, ValueError):
    """Raised for invalid universe, simulation, scoring or preset settings."""


class ProtocolViolation(BorderwatchError, ValueError):
    """Raised when traffic goes directly between two non-router nodes."""


class CircuitBuildError(BorderwatchError, RuntimeError):
    """Raised when a path-selection strategy cannot be satisfied."""


class CircuitStateError(BorderwatchError, RuntimeError):
    """Raised when an operation is applied to a circuit in the wrong state."""


class UndefinedMetricsError(BorderwatchError, ValueError):
    """Raised when metrics are requested for a trace without circuits."""
