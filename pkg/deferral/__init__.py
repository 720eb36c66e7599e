# Deferral package
"""
Surrogate losses, Bayes oracles, consistency-bound checks and training
pipelines for learning with abstention and multi-expert deferral.
"""

from .core import CostModel, DiscreteDistribution, LabelSpace, RegressionLoss
from .errors import (
    DeferralError,
    FreezeViolationError,
    InvalidConfigError,
    InvalidInputError,
    InvalidParameterError,
    NoGuaranteeWarning,
    TrainingDivergedError,
)
from .surrogates import SurrogateSpec, SurrogateTag, evaluate

__all__ = [
    "CostModel",
    "DeferralError",
    "DiscreteDistribution",
    "FreezeViolationError",
    "InvalidConfigError",
    "InvalidInputError",
    "InvalidParameterError",
    "LabelSpace",
    "NoGuaranteeWarning",
    "RegressionLoss",
    "SurrogateSpec",
    "SurrogateTag",
    "TrainingDivergedError",
    "evaluate",
]
