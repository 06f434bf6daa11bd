"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A run configuration failed schema or domain validation."""


class InvariantViolation(RuntimeError):
    """A numerical invariant that the code relies on failed at runtime."""
