"""Exception types shared across the package."""


class ValidationError(ValueError):
    """An argument or input violates a precondition."""


class ConfigError(ValueError):
    """A configuration key, asset, or checkpoint is unusable."""


class FormatError(ValueError):
    """A file does not follow its documented binary layout."""


class NonFiniteLossError(RuntimeError):
    """A training loss became NaN or infinite."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
