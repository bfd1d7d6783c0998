"""Exception types shared across the package."""


class MSCNError(Exception):
    """Base class for all package errors."""


class ShapeError(MSCNError, ValueError):
    pass


class DegenerateInputError(MSCNError, ValueError):
    pass


class UsageError(MSCNError, ValueError):
    pass


class ConfigError(MSCNError, ValueError):
    pass


class ValidationError(MSCNError, ValueError):
    """A dataset manifest row or file failed validation."""


class NumericalError(MSCNError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, *, stage: int, epoch: int, batch: int):
        super().__init__(message)
        self.stage = stage
        self.epoch = epoch
        self.batch = batch


class CheckpointError(MSCNError, ValueError):
    pass
