"""Exception types raised across the package."""


class DVMergeError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(DVMergeError, ValueError):
    """Two block containers do not share the same structure."""


class DegenerateInputError(DVMergeError, ValueError):
    """An input is valid structurally but cannot be used (e.g. a zero vector)."""


class NonFiniteError(DVMergeError, FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""


class FormatError(DVMergeError, ValueError):
    """A serialized file is malformed."""


class ConfigError(DVMergeError, ValueError):
    """An experiment config is malformed or incomplete."""

    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.line = line
        self.key = key
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class ConstraintError(DVMergeError, RuntimeError):
    """A protocol constraint could not be satisfied."""
