"""Exception hierarchy shared across the package."""


class StrokeDiffError(Exception):
    """Base class for all package errors."""


class ShapeError(StrokeDiffError, ValueError):
    pass


class SVGParseError(StrokeDiffError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(StrokeDiffError, ValueError):
    """Raised for invalid dataset samples, images or masks."""

    def __init__(self, message: str, sample_id: str | None = None):
        self.sample_id = sample_id
        if sample_id is not None:
            message = f"[{sample_id}] {message}"
        super().__init__(message)


class ConfigError(StrokeDiffError, ValueError):
    pass


class NumericalError(StrokeDiffError, ArithmeticError):
    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message)
