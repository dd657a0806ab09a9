class ConfigError(ValueError):
    """Raised when shapes or hyperparameters are inconsistent with the model config."""


class InputError(ValueError):
    """Raised for malformed inputs (bad token ids, empty frame lists, ...)."""


class ManifestError(ValueError):
    """Raised when a manifest or annotation file fails validation."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
