"""Exception types shared across the package."""


class ConfigError(Exception):
    """Invalid or inconsistent configuration (CLI exit code 1)."""


class NumericalError(RuntimeError):
    """Numerical failure: NaN loss, singular system, CFL violation (exit code 2)."""


class ShapeError(ValueError):
    """Tensor/field shape mismatch, reported with the offending context."""
