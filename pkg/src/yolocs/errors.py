class YolocsError(Exception):
    """Base class for all library errors."""


class DimensionMismatchError(YolocsError, ValueError):
    """Tensor shapes do not agree with what a layer expects."""

    def __init__(self, message: str, layer: str | None = None):
        self.layer = layer
        if layer:
            message = f"{layer}: {message}"
        super().__init__(message)


class ConfigError(YolocsError, ValueError):
    """Malformed or inconsistent model config."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InternalError(YolocsError, RuntimeError):
    """A runtime check failed that static shape inference should have caught."""
