"""
Exception hierarchy for the deferral library.
"""

from typing import Optional


class DeferralError(Exception):
    """Base class for every error raised by the library."""


class InvalidInputError(DeferralError, ValueError):
    """Raised when a score vector, label or distribution row is malformed."""


class InvalidParameterError(DeferralError, ValueError):
    """Raised when a loss parameter is outside its admissible range."""


class InvalidConfigError(DeferralError, ValueError):
    """Raised when a configuration document or pipeline setup is inconsistent."""


class TrainingDivergedError(DeferralError, RuntimeError):
    """Raised when a fit produces a non-finite loss or gradient."""

    def __init__(self, message: str, epoch: int, last_finite_loss: Optional[float] = None):
        super().__init__(message)
        self.epoch = epoch
        self.last_finite_loss = last_finite_loss

    def to_dict(self) -> dict:
        return {
            "error": str(self),
            "epoch": self.epoch,
            "last_finite_loss": self.last_finite_loss,
        }


class FreezeViolationError(DeferralError, AssertionError):
    """Raised when first-stage parameters change during the second stage."""


class NoGuaranteeWarning(UserWarning):
    """Emitted for surrogate combinations without a consistency guarantee."""

    def __init__(self, message: str, tag: str, reason: str):
        super().__init__(message)
        self.tag = tag
        self.reason = reason
