"""Exception hierarchy shared by every detuner module."""


class DetunerError(Exception):
    """Base class for all errors raised by detuner."""


class DimensionError(DetunerError, ValueError):
    """A requested rank or truncation does not fit the matrix shape."""


class NonFiniteError(DetunerError, ValueError):
    """An input matrix or loss value contains NaN or Inf."""


class ShapeMismatchError(DetunerError, ValueError):
    """Matrices that must share a shape do not."""


class UnderdeterminedError(DetunerError, ValueError):
    """Too few fine-tuned models to separate the base from the residuals."""


class DivergenceError(DetunerError, ArithmeticError):
    """The optimizer produced a non-finite loss."""


class InputError(DetunerError, ValueError):
    """Inputs are structurally unusable (wrong counts, empty selections...)."""


class KeyMismatchError(InputError):
    """Checkpoints do not share the same set of layer names."""

    def __init__(self, message, difference=()):
        super().__init__(message)
        self.difference = sorted(difference)


class NoCommonAncestorError(DetunerError):
    """Pairwise differences give no way to tell which models share a base."""


class ConfigError(DetunerError, ValueError):
    """A configuration value is invalid."""


class CheckpointError(DetunerError, ValueError):
    """Base class for container read/write failures."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


class CheckpointFormatError(CheckpointError):
    """Magic bytes, version or manifest JSON are not what the reader expects."""


class TruncatedFileError(CheckpointError):
    """The file ends before a declared section does."""


class BoundsError(CheckpointError):
    """A declared offset/length is inconsistent or points outside the payload."""


class UnknownDtypeError(CheckpointError):
    """A tensor uses a dtype code the reader does not support."""


class MalformedHeaderError(CheckpointError):
    """The interchange-format header cannot be parsed or is out of bounds."""
