"""
State management for the training pipelines.
"""

from dataclasses import dataclass, field
from typing import List, Optional

from .core import CostModel
from .surrogates import SurrogateSpec
from .synthdata import Dataset
from .training import (
    FitResult,
    Model,
    ModelSpec,
    OptimizerSpec,
    Stage1Loss,
    SystemMetrics,
    TraceRow,
    TrainedPair,
)


@dataclass
class PipelineState:
    """State object that flows through the LangGraph training workflow."""

    # Input parameters
    dataset: Dataset
    spec: Optional[SurrogateSpec]
    model_spec: ModelSpec
    cost_model: Optional[CostModel]
    optimizer: OptimizerSpec
    stage1_optimizer: Optional[OptimizerSpec] = None
    stage1: Stage1Loss = Stage1Loss.LOGISTIC
    seed: int = 0
    max_attempts: int = 1

    # Workflow state
    current_attempt: int = 0
    learning_rate: float = 0.0
    predictor: Optional[Model] = None
    deferral: Optional[Model] = None
    frozen_checksum: str = ""
    converged: bool = False
    traces: List[TraceRow] = field(default_factory=list)

    # Output
    pair: Optional[TrainedPair] = None
    metrics: Optional[SystemMetrics] = None

    def increment_attempt(self):
        """Increment the attempt counter of the retried stage."""
        self.current_attempt += 1

    def has_reached_max_attempts(self) -> bool:
        return self.current_attempt >= self.max_attempts

    def record_trace(self, result: FitResult, replace_stage: bool = False):
        """Append a fit trace; a retried stage replaces its earlier rows."""
        rows = result.trace
        if replace_stage and rows:
            stage = rows[0].stage
            self.traces = [r for r in self.traces if r.stage != stage]
        self.traces = self.traces + list(rows)
        self.converged = result.converged
