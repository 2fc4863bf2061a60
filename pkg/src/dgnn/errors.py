"""Exception hierarchy shared by every module of the toolkit."""


class DGNNError(Exception):
    """Base class for all toolkit errors."""


class IngestError(DGNNError):
    """A dataset file is missing or unreadable."""


class FormatError(DGNNError):
    """A dataset file is readable but structurally inconsistent."""


class ConfigError(DGNNError, ValueError):
    """Invalid configuration or argument combination."""


class ShapeError(DGNNError, ValueError):
    """Operand shapes are incompatible."""


class UsageError(DGNNError):
    """An API was called in a way its contract forbids."""


class SingularMatrixError(DGNNError, ArithmeticError):
    """A correction matrix could not be inverted."""


class DivergenceError(DGNNError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
