"""Exception hierarchy shared by every pixtok module."""

from typing import Optional


class PixtokError(Exception):
    """Base class for all errors raised by pixtok."""


class ConfigError(PixtokError):
    """Configuration file missing, malformed, or failing schema validation."""


class ShapeError(PixtokError, ValueError):
    """Tensor or image dimensions do not satisfy an operation's contract."""


class NonFiniteError(PixtokError, FloatingPointError):
    """A forward op produced NaN or Inf.

    Attributes:
        op: Name of the op whose output was not finite.
    """

    def __init__(self, op: str, message: Optional[str] = None):
        self.op = op
        super().__init__(message or f"non-finite values produced by op '{op}'")


class PermutationError(PixtokError):
    """Permutation could not be generated, or failed validation."""


class CheckpointError(PixtokError):
    """Checkpoint is malformed or incompatible with the requested model."""


class DatasetFormatError(PixtokError):
    """Dataset file does not follow its on-disk format.

    Attributes:
        path: File being parsed.
        offset: Byte offset at which parsing failed.
    """

    def __init__(self, path: str, offset: int, reason: str):
        self.path = path
        self.offset = offset
        self.reason = reason
        super().__init__(f"{path}: {reason} (at byte offset {offset})")


class OptimizerConfigError(PixtokError):
    """Optimizer parameter groups violate the weight-decay contract."""


class QueryOutOfRangeError(PixtokError, ValueError):
    """Requested query coordinate lies outside the token grid."""
