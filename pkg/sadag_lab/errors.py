"""Exception hierarchy shared by every stage of the lab."""

from typing import Optional


class SadagError(Exception):
    """Base class for all errors raised by sadag_lab."""


class ShapeError(SadagError, ValueError):
    """Operand shapes do not conform for an operation."""


class NonFiniteError(SadagError, ArithmeticError):
    """A value that must be finite is not (sqrt of a negative, division by zero, NaN loss)."""


class DegenerateRangeError(SadagError, ValueError):
    """A quantization range collapsed to a single value."""


class DegenerateBatchError(SadagError, ValueError):
    """A batch has zero variance where batch statistics are required."""


class NotNormalizedError(SadagError, ValueError):
    """Rows passed to a loss that expects unit vectors are not unit length."""


class ZeroGradientError(SadagError, ArithmeticError):
    """A gradient needed for a normalized ascent direction is exactly zero."""


class DivergenceError(SadagError, RuntimeError):
    """An optimization loop stopped making sense (loss exploded or became non-finite)."""


class ConfigError(SadagError, ValueError):
    """Invalid configuration entry."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.message = message
        self.key = key
        self.line = line
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(f"{prefix}{message}")


class FormatError(SadagError, ValueError):
    """A binary artifact is truncated or malformed."""

    def __init__(self, message: str, offset: int = 0, path: Optional[str] = None):
        self.offset = offset
        self.path = path
        location = f"{path} " if path else ""
        super().__init__(f"{location}at byte {offset}: {message}")


class ArtifactMismatchError(SadagError, ValueError):
    """An artifact on disk was produced under a different configuration."""


class StageError(SadagError, RuntimeError):
    """A pipeline stage failed; wraps the underlying error."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")
