"""Errors shared across modules."""


class ConfigError(ValueError):
    """Invalid or malformed run configuration."""


class InternalInvariantViolation(RuntimeError):
    """A simulation state invariant broke mid-run; the run is aborted."""
