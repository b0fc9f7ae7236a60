"""Exception types shared across the package."""


class GenDDError(Exception):
    """Base class for all package errors."""


class ValidationError(GenDDError, ValueError):
    """Bad input shape, range or value."""


class ConfigError(GenDDError):
    """Unknown or unsupported configuration."""


class NonFiniteError(GenDDError, FloatingPointError):
    """A loss or sampler state became NaN/inf."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
