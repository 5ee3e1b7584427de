"""Exception hierarchy shared by every rgns module."""


class RgnsError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(RgnsError, ValueError):
    """Shapes, widths or settings that cannot work together."""


class NumericError(RgnsError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DegenerateMatrixError(NumericError):
    """A matrix is (numerically) rank deficient where full rank is needed."""


class ContractError(RgnsError, RuntimeError):
    """An operation was called with state that violates its precondition."""


class FormatError(RgnsError, ValueError):
    """A binary or text file does not match its declared format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TruncatedFileError(FormatError):
    pass


class InsufficientDataError(RgnsError, ValueError):
    """Not enough frames / samples / history for the requested operation."""


class GenerationError(RgnsError, RuntimeError):
    """The toy integrator blew up."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step


class RolloutDivergedError(NumericError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step


class DriftError(NumericError):
    """Reversible recomputation drifted too far from the stored forward output."""
