"""Exception types raised across the package."""


class RDKVError(Exception):
    """Base class for every error raised by rdkv."""


class ShapeError(RDKVError, ValueError):
    """Tensor dimensions disagree with what an operation requires."""


class NumericError(RDKVError, ArithmeticError):
    """Non-finite input, degenerate denominator or a solver that failed to converge."""


class FormatError(RDKVError, ValueError):
    """A serialized cache, table or allocation could not be decoded."""


class TruncationError(FormatError):
    """Payload is shorter than its header declares."""
