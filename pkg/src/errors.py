"""Exception hierarchy for the reconstruction pipeline."""

from typing import Optional


class InnerGSError(Exception):
    """Base exception for all pipeline errors."""
    pass


class DegenerateInputError(InnerGSError):
    """Input has no meaningful geometric interpretation (e.g. zero quaternion)."""
    pass


class InvalidConfigError(InnerGSError):
    """A configuration value is outside its allowed range."""
    pass


class ContractViolationError(InnerGSError):
    """Caller broke a precondition (shape mismatch, asymmetric matrix, ...)."""
    pass


class FormatError(InnerGSError):
    """A volume or checkpoint file could not be parsed."""
    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(InnerGSError):
    """Base exception for failures inside the training loop."""
    pass


class NonFiniteLossError(TrainingError):
    """A slice produced a NaN or infinite loss."""
    def __init__(self, message: str, slice_id: int):
        super().__init__(f"{message} (slice {slice_id})")
        self.slice_id = slice_id


class EmptyCloudError(TrainingError):
    """Refinement removed every Gaussian from the cloud."""
    pass
