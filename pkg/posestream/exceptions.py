"""Exceptions raised by posestream.
"""


class PoseStreamError(Exception):
    """Base class of every error raised on purpose by posestream."""


class ShapeError(PoseStreamError, ValueError):
    """Array or tensor shapes do not agree."""


class ContractError(PoseStreamError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(PoseStreamError, ValueError):
    """A configuration object or file is invalid."""


class DivergenceError(PoseStreamError, RuntimeError):
    """A loss or gradient became NaN or infinite."""


class IoError(PoseStreamError, OSError):
    """A file could not be read or written in the expected format."""
