"""
LangGraph workflows for single-stage and two-stage training.
"""

import logging
from dataclasses import fields, replace
from typing import Any, Dict, Optional

from langgraph.graph import END, StateGraph

from .core import CostModel, RegressionLoss
from .errors import FreezeViolationError, InvalidConfigError
from .state import PipelineState
from .surrogates import TWO_STAGE_TAGS, SurrogateSpec
from .synthdata import Dataset
from .training import (
    ModelSpec,
    OptimizerSpec,
    Stage1Loss,
    TrainedPair,
    evaluate_system,
    run_single_stage,
    run_stage_one,
    run_stage_two,
)

logger = logging.getLogger(__name__)


def _as_update(state: PipelineState) -> Dict[str, Any]:
    return {f.name: getattr(state, f.name) for f in fields(state)}


def _current_optimizer(state: PipelineState) -> OptimizerSpec:
    if not state.learning_rate:
        state.learning_rate = state.optimizer.lr
    return replace(state.optimizer, lr=state.learning_rate)


def stage_one_node(state: PipelineState) -> Dict[str, Any]:
    """Stage one: fit the predictor with the standard loss."""
    logger.info("🚀 Starting stage one (%s)...", Stage1Loss(state.stage1).value)
    loss = state.cost_model.loss if state.cost_model is not None else RegressionLoss.SQUARED
    predictor, result = run_stage_one(
        state.dataset,
        state.model_spec,
        state.stage1_optimizer or state.optimizer,
        state.seed,
        state.stage1,
        loss,
    )
    state.predictor = predictor
    state.record_trace(result)
    return _as_update(state)


def freeze_node(state: PipelineState) -> Dict[str, Any]:
    """Record the predictor checksum before stage two touches anything."""
    state.frozen_checksum = state.predictor.checksum()
    logger.info("🧊 Predictor frozen (%s)", state.frozen_checksum[:12])
    return _as_update(state)


def stage_two_node(state: PipelineState) -> Dict[str, Any]:
    """Stage two: fit the deferral scores against the frozen predictor."""
    state.increment_attempt()
    optimizer = _current_optimizer(state)
    logger.info(
        "🛠️ Starting stage two %s (attempt %d/%d, lr=%g)...",
        state.spec.tag.value, state.current_attempt, state.max_attempts, optimizer.lr,
    )
    rejector, result = run_stage_two(
        state.dataset, state.predictor, state.spec, state.model_spec, state.cost_model, optimizer, state.seed
    )
    state.deferral = rejector
    state.record_trace(result, replace_stage=True)
    return _as_update(state)


def verify_freeze_node(state: PipelineState) -> Dict[str, Any]:
    """Fail if stage two changed the predictor."""
    checksum = state.predictor.checksum()
    if checksum != state.frozen_checksum:
        raise FreezeViolationError(
            f"predictor checksum changed during stage two: {state.frozen_checksum} -> {checksum}"
        )
    logger.info("⚙️ Freeze verified")
    return _as_update(state)


def fit_node(state: PipelineState) -> Dict[str, Any]:
    """Single stage: fit every score jointly."""
    state.increment_attempt()
    optimizer = _current_optimizer(state)
    label = state.spec.tag.value if state.spec is not None else "plain"
    logger.info(
        "🚀 Starting single-stage fit %s (attempt %d/%d, lr=%g)...",
        label, state.current_attempt, state.max_attempts, optimizer.lr,
    )
    models, result = run_single_stage(
        state.dataset, state.spec, state.model_spec, state.cost_model, optimizer, state.seed
    )
    state.predictor = models["predictor"]
    state.deferral = models.get("rejector")
    state.record_trace(result, replace_stage=True)
    return _as_update(state)


def should_retry(state: PipelineState) -> str:
    """Router after a fit: retry a non-converged stage while attempts remain."""
    if state.converged:
        return "evaluation"
    if state.has_reached_max_attempts():
        logger.warning("Maximum attempts (%d) reached without convergence", state.max_attempts)
        return "evaluation"
    return "retry"


def retry_node(state: PipelineState) -> Dict[str, Any]:
    """Halve the learning rate before the next attempt."""
    state.learning_rate = state.learning_rate / 2.0
    logger.info("🩺 Retrying with lr=%g", state.learning_rate)
    return _as_update(state)


def evaluation_node(state: PipelineState) -> Dict[str, Any]:
    """Assemble the trained pair and compute system metrics."""
    logger.info("✅ Starting evaluation...")
    two_stage = bool(state.frozen_checksum)
    state.pair = TrainedPair(
        spec=state.spec,
        predictor=state.predictor,
        deferral=state.deferral,
        stages=("stage_one", "stage_two") if two_stage else ("single_stage",),
        trace=list(state.traces),
        frozen_checksum=state.frozen_checksum or None,
        converged=state.converged,
    )
    state.metrics = evaluate_system(state.pair, state.dataset, state.cost_model)
    return _as_update(state)


def create_two_stage_workflow():
    """Create the LangGraph workflow for two-stage training."""
    workflow = StateGraph(PipelineState)

    workflow.add_node("stage_one", stage_one_node)
    workflow.add_node("freeze", freeze_node)
    workflow.add_node("stage_two", stage_two_node)
    workflow.add_node("verify_freeze", verify_freeze_node)
    workflow.add_node("retry", retry_node)
    workflow.add_node("evaluation", evaluation_node)

    workflow.set_entry_point("stage_one")
    workflow.add_edge("stage_one", "freeze")
    workflow.add_edge("freeze", "stage_two")
    workflow.add_edge("stage_two", "verify_freeze")
    workflow.add_conditional_edges(
        "verify_freeze",
        should_retry,
        {"retry": "retry", "evaluation": "evaluation"},
    )
    workflow.add_edge("retry", "stage_two")
    workflow.add_edge("evaluation", END)

    return workflow.compile()


def create_single_stage_workflow():
    """Create the LangGraph workflow for single-stage training."""
    workflow = StateGraph(PipelineState)

    workflow.add_node("fit", fit_node)
    workflow.add_node("retry", retry_node)
    workflow.add_node("evaluation", evaluation_node)

    workflow.set_entry_point("fit")
    workflow.add_conditional_edges(
        "fit",
        should_retry,
        {"retry": "retry", "evaluation": "evaluation"},
    )
    workflow.add_edge("retry", "fit")
    workflow.add_edge("evaluation", END)

    return workflow.compile()


def run_pipeline(state: PipelineState, two_stage: bool) -> PipelineState:
    workflow = create_two_stage_workflow() if two_stage else create_single_stage_workflow()
    result = workflow.invoke(_as_update(state), {"recursion_limit": 10 + 4 * max(state.max_attempts, 1)})
    return PipelineState(**result) if isinstance(result, dict) else result


def train_single_stage(
    dataset: Dataset,
    spec: Optional[SurrogateSpec],
    model_spec: ModelSpec,
    cost_model: Optional[CostModel],
    optimizer: OptimizerSpec,
    seed: int = 0,
    max_attempts: int = 1,
) -> TrainedPair:
    state = PipelineState(
        dataset=dataset,
        spec=spec,
        model_spec=model_spec,
        cost_model=cost_model,
        optimizer=optimizer,
        seed=seed,
        max_attempts=max_attempts,
    )
    return run_pipeline(state, two_stage=False).pair


def train_two_stage(
    dataset: Dataset,
    stage1: Stage1Loss,
    spec: SurrogateSpec,
    model_spec: ModelSpec,
    cost_model: Optional[CostModel],
    optimizer: OptimizerSpec,
    stage1_optimizer: Optional[OptimizerSpec] = None,
    seed: int = 0,
    max_attempts: int = 1,
) -> TrainedPair:
    """Stage one with ``stage1``, then ``spec`` on the frozen predictor.

    Raises:
        InvalidConfigError: If ``spec`` is not a second-stage surrogate or
            ``stage1`` does not fit the dataset.
        FreezeViolationError: If the predictor changed during stage two.
    """
    if spec.tag not in TWO_STAGE_TAGS:
        raise InvalidConfigError(f"{spec.tag.value} is not a second-stage surrogate")
    state = PipelineState(
        dataset=dataset,
        spec=spec,
        model_spec=model_spec,
        cost_model=cost_model,
        optimizer=optimizer,
        stage1_optimizer=stage1_optimizer,
        stage1=Stage1Loss(stage1),
        seed=seed,
        max_attempts=max_attempts,
    )
    return run_pipeline(state, two_stage=True).pair
