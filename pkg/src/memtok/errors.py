"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class ConfigError(ValueError):
    """Raised when a configuration value is invalid or inconsistent."""


class FormatError(ValueError):
    """Raised on malformed binary files; carries the byte offset of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CacheError(RuntimeError):
    """Raised when a memory-cache entry is inconsistent with the current clip."""


class OracleError(RuntimeError):
    """Raised when a function under finite-difference checking is not deterministic."""


class DivergenceError(RuntimeError):
    """Raised when a training run diverges past the abort threshold."""
