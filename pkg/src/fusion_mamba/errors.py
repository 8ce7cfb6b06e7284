"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigurationError(ValueError):
    """A static configuration value (kernel size, channel count, ...) is invalid."""


class UsageError(RuntimeError):
    """An API was called in a way its contract forbids."""


class ConfigParseError(ValueError):
    """A key=value config file could not be parsed."""

    def __init__(self, message, lineno=None, line=None):
        self.lineno = lineno
        self.line = line
        if lineno is not None:
            message = f"line {lineno}: {message} ({line!r})"
        super().__init__(message)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""
