"""
Full-batch gradient-descent training of linear and one-hidden-layer models
on any surrogate, plus the system-level evaluation of a trained pair.

Models are plain numpy with hand-written backward passes. Every stage is a
deterministic function of its seed.
"""

import hashlib
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .base_losses import MulticlassFamily, family_value_and_grad
from .core import (
    CostModel,
    RegressionLoss,
    RejectorConvention,
    predict_labels,
    regression_loss,
    regression_loss_grad,
    rejector_decisions,
)
from .errors import InvalidConfigError, TrainingDivergedError
from .surrogates import TWO_STAGE_TAGS, SurrogateSpec, SurrogateTag, evaluate
from .synthdata import Dataset
from .target_losses import abstention_decisions, routed_loss

logger = logging.getLogger(__name__)

ABSTENTION_TAGS = (
    SurrogateTag.ABSTAIN_L_MU,
    SurrogateTag.ABSTAIN_TWO_STAGE,
    SurrogateTag.PR_SINGLE,
    SurrogateTag.PR_TWO_STAGE,
)

REGRESSION_TAGS = (
    SurrogateTag.REG_SINGLE,
    SurrogateTag.REG_TWO_STAGE,
    SurrogateTag.REG_SINGLE_EXPERT,
)

DEFAULT_BASE_COSTS = (0.1, 0.12, 0.14)


# -- models ------------------------------------------------------------------------


class Arch(str, Enum):
    LINEAR = "linear"
    MLP = "mlp"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and shape of a score model; zero dims are filled in by the pipeline."""

    arch: Arch = Arch.LINEAR
    input_dim: int = 0
    output_dim: int = 0
    hidden: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "arch", Arch(self.arch))
        if self.hidden < 1:
            raise InvalidConfigError("hidden width must be positive")
        if self.input_dim < 0 or self.output_dim < 0:
            raise InvalidConfigError("model dimensions must be non-negative")

    def resolved(self, input_dim: int, output_dim: int, seed: int) -> "ModelSpec":
        if self.input_dim and self.input_dim != input_dim:
            raise InvalidConfigError(f"model expects {self.input_dim} inputs, data has {input_dim}")
        if self.output_dim and self.output_dim != output_dim:
            raise InvalidConfigError(f"model has {self.output_dim} outputs, the loss needs {output_dim}")
        return replace(self, input_dim=input_dim, output_dim=output_dim, seed=seed)


class Model(ABC):
    """Score model ``X -> (m, output_dim)`` with parameters in ``self.params``."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.params: Dict[str, np.ndarray] = self._init_params(np.random.default_rng(spec.seed))

    @abstractmethod
    def _init_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        ...

    @abstractmethod
    def forward(self, X: np.ndarray) -> Tuple[np.ndarray, tuple]:
        ...

    @abstractmethod
    def backward(self, cache: tuple, grad_out: np.ndarray) -> Dict[str, np.ndarray]:
        ...

    @abstractmethod
    def zero_output(self):
        """Set the output layer to zero so every score starts at 0."""

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.forward(X)[0]

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.params[name], dtype=np.float64).tobytes())
        return digest.hexdigest()


class LinearModel(Model):
    def _init_params(self, rng):
        d, k = self.spec.input_dim, self.spec.output_dim
        return {"W": rng.standard_normal((d, k)) / np.sqrt(max(d, 1)), "b": np.zeros(k)}

    def forward(self, X):
        return X @ self.params["W"] + self.params["b"], (X,)

    def backward(self, cache, grad_out):
        (X,) = cache
        return {"W": X.T @ grad_out, "b": grad_out.sum(axis=0)}

    def zero_output(self):
        self.params = {k: np.zeros_like(v) for k, v in self.params.items()}


class MLPModel(Model):
    """One hidden ReLU layer."""

    def _init_params(self, rng):
        d, h, k = self.spec.input_dim, self.spec.hidden, self.spec.output_dim
        return {
            "W1": rng.standard_normal((d, h)) * np.sqrt(2.0 / max(d, 1)),
            "b1": np.zeros(h),
            "W2": rng.standard_normal((h, k)) / np.sqrt(h),
            "b2": np.zeros(k),
        }

    def forward(self, X):
        pre = X @ self.params["W1"] + self.params["b1"]
        hidden = np.maximum(pre, 0.0)
        return hidden @ self.params["W2"] + self.params["b2"], (X, pre, hidden)

    def backward(self, cache, grad_out):
        X, pre, hidden = cache
        g_hidden = (grad_out @ self.params["W2"].T) * (pre > 0)
        return {
            "W1": X.T @ g_hidden,
            "b1": g_hidden.sum(axis=0),
            "W2": hidden.T @ grad_out,
            "b2": grad_out.sum(axis=0),
        }

    def zero_output(self):
        self.params["W2"] = np.zeros_like(self.params["W2"])
        self.params["b2"] = np.zeros_like(self.params["b2"])


def build_model(spec: ModelSpec) -> Model:
    if spec.input_dim < 1 or spec.output_dim < 1:
        raise InvalidConfigError("model dimensions must be resolved before building")
    return LinearModel(spec) if spec.arch == Arch.LINEAR else MLPModel(spec)


# -- optimisation --------------------------------------------------------------------


class OptimizerKind(str, Enum):
    GD = "gd"
    GD_MOMENTUM = "gd_momentum"


@dataclass(frozen=True)
class OptimizerSpec:
    kind: OptimizerKind = OptimizerKind.GD
    lr: float = 0.1
    momentum: float = 0.9
    epochs: int = 200

    def __post_init__(self):
        object.__setattr__(self, "kind", OptimizerKind(self.kind))
        if not self.lr > 0:
            raise InvalidConfigError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidConfigError("momentum must lie in [0, 1)")
        if self.epochs < 0:
            raise InvalidConfigError("epochs must be non-negative")

    def halved(self) -> "OptimizerSpec":
        return replace(self, lr=self.lr / 2.0)


@dataclass(frozen=True)
class TraceRow:
    stage: str
    epoch: int
    surrogate_loss: float
    target_loss: float


@dataclass(frozen=True)
class FitResult:
    trace: List[TraceRow]
    initial_loss: float
    final_loss: float

    @property
    def converged(self) -> bool:
        return self.final_loss <= self.initial_loss


@dataclass(frozen=True)
class TrainingData:
    """Arrays a stage trains on; ``costs`` is ``(m, n_e)`` or ``None``."""

    X: np.ndarray
    y: np.ndarray
    costs: Optional[np.ndarray]
    expert_outputs: Optional[np.ndarray]
    n_classes: Optional[int]
    loss: RegressionLoss = RegressionLoss.SQUARED

    @property
    def n_experts(self) -> int:
        return 0 if self.costs is None else self.costs.shape[1]

    @classmethod
    def build(cls, dataset: Dataset, spec: Optional[SurrogateSpec], cost_model: Optional[CostModel]) -> "TrainingData":
        m = dataset.n_samples
        loss = cost_model.loss if cost_model is not None else RegressionLoss.SQUARED
        if spec is None:
            costs = None
        elif spec.tag in ABSTENTION_TAGS:
            # per-sample costs from the dataset override the surrogate's c
            per_sample = dataset.metadata.get("abstention_costs")
            if per_sample is None:
                costs = np.full((m, 1), float(spec.c))
            else:
                costs = np.asarray(per_sample, dtype=float).reshape(m, 1)
        else:
            if cost_model is None:
                raise InvalidConfigError(f"{spec.tag.value} needs a cost model")
            if dataset.n_experts != cost_model.n_e:
                raise InvalidConfigError(
                    f"cost model has {cost_model.n_e} experts, dataset has {dataset.n_experts}"
                )
            costs = cost_model.cost_matrix(dataset.expert_outputs, dataset.y)
        if spec is not None:
            regression_tag = spec.tag in REGRESSION_TAGS
            if regression_tag != dataset.is_regression:
                kind = "regression" if dataset.is_regression else "classification"
                raise InvalidConfigError(f"{spec.tag.value} does not apply to a {kind} dataset")
            if spec.tag == SurrogateTag.REG_SINGLE_EXPERT and costs.shape[1] != 1:
                raise InvalidConfigError("reg_single_expert needs exactly one expert")
        return cls(
            X=np.asarray(dataset.X, dtype=float),
            y=dataset.y,
            costs=costs,
            expert_outputs=dataset.expert_outputs,
            n_classes=dataset.n_classes,
            loss=loss,
        )


def output_layout(spec: SurrogateSpec, n_classes: Optional[int], n_e: int) -> Dict[str, int]:
    """Output width of each trainable model for a surrogate."""
    tag = spec.tag
    n = n_classes or 0
    return {
        SurrogateTag.ABSTAIN_L_MU: {"predictor": n + 1},
        SurrogateTag.DEFER_SINGLE: {"predictor": n + n_e},
        SurrogateTag.PR_SINGLE: {"predictor": n, "rejector": 1},
        SurrogateTag.REG_SINGLE: {"predictor": 1, "rejector": n_e + 1},
        SurrogateTag.REG_SINGLE_EXPERT: {"predictor": 1, "rejector": 1},
        SurrogateTag.ABSTAIN_TWO_STAGE: {"rejector": 1},
        SurrogateTag.PR_TWO_STAGE: {"rejector": 1},
        SurrogateTag.DEFER_TWO_STAGE_SCORE: {"rejector": n_e},
        SurrogateTag.DEFER_TWO_STAGE_PR: {"rejector": n_e},
        SurrogateTag.REG_TWO_STAGE: {"rejector": n_e + 1},
    }[tag]


class Objective(ABC):
    """Mean loss over the data and its gradient with respect to model outputs."""

    def __init__(self, data: TrainingData):
        self.data = data

    @abstractmethod
    def loss_and_grads(self, outputs: Dict[str, np.ndarray]) -> Tuple[float, Dict[str, np.ndarray]]:
        ...

    @abstractmethod
    def target_loss(self, outputs: Dict[str, np.ndarray]) -> float:
        ...


class ClassificationObjective(Objective):
    """First-stage multi-class loss on the predictor scores."""

    def __init__(self, data: TrainingData, family: Optional[MulticlassFamily] = None):
        super().__init__(data)
        self.family = family or MulticlassFamily.logistic()

    def loss_and_grads(self, outputs):
        scores = outputs["predictor"]
        value, grad = family_value_and_grad(self.family, scores, self.data.y)
        m = scores.shape[0]
        return float(np.mean(value)), {"predictor": grad / m}

    def target_loss(self, outputs):
        return float(np.mean(predict_labels(outputs["predictor"]) != self.data.y))


class RegressionObjective(Objective):
    def loss_and_grads(self, outputs):
        pred = outputs["predictor"][:, 0]
        m = pred.shape[0]
        value = regression_loss(self.data.loss, pred, self.data.y)
        grad = regression_loss_grad(self.data.loss, pred, self.data.y)
        return float(np.mean(value)), {"predictor": (grad / m)[:, None]}

    def target_loss(self, outputs):
        return float(np.mean(regression_loss(self.data.loss, outputs["predictor"][:, 0], self.data.y)))


@dataclass(frozen=True)
class Decisions:
    """Per-sample routing: index 0 keeps the predictor, ``j`` picks expert (or abstention) ``j``."""

    index: np.ndarray
    prediction: np.ndarray
    base_loss: np.ndarray


def system_decisions(
    spec: Optional[SurrogateSpec],
    predictor_out: np.ndarray,
    rejector_out: Optional[np.ndarray],
    data: TrainingData,
) -> Decisions:
    """Apply the decision rule that matches the surrogate's target loss."""
    P = predictor_out
    tag = None if spec is None else spec.tag
    regression = data.n_classes is None
    n = data.n_classes or 0
    m = P.shape[0]
    if tag == SurrogateTag.ABSTAIN_L_MU:
        index = (abstention_decisions(P) == n).astype(int)
        prediction = predict_labels(P[:, :n])
    elif tag == SurrogateTag.DEFER_SINGLE:
        decision = predict_labels(P)
        index = np.where(decision >= n, decision - n + 1, 0)
        prediction = predict_labels(P[:, :n])
    else:
        prediction = P[:, 0] if regression else predict_labels(P)
        R = rejector_out
        if tag is None:
            index = np.zeros(m, dtype=int)
        elif tag in (SurrogateTag.PR_SINGLE, SurrogateTag.PR_TWO_STAGE, SurrogateTag.REG_SINGLE_EXPERT):
            index = (R[:, 0] <= 0).astype(int)
        elif tag == SurrogateTag.ABSTAIN_TWO_STAGE:
            index = (R[:, 0] >= P.max(axis=1)).astype(int)
        elif tag == SurrogateTag.DEFER_TWO_STAGE_SCORE:
            index = predict_labels(np.concatenate([P.max(axis=1, keepdims=True), R], axis=1))
        elif tag == SurrogateTag.DEFER_TWO_STAGE_PR:
            index = rejector_decisions(R, RejectorConvention.ARGMIN_DEFER)
        else:
            index = rejector_decisions(R, RejectorConvention.ARGMAX_DEFER)
    if regression:
        base = regression_loss(data.loss, prediction, data.y)
    else:
        base = (prediction != data.y).astype(float)
    return Decisions(index=np.asarray(index, dtype=int), prediction=prediction, base_loss=base)


def target_losses(decisions: Decisions, data: TrainingData) -> np.ndarray:
    if data.costs is None:
        return decisions.base_loss
    return routed_loss(decisions.base_loss, data.costs, decisions.index)


class SurrogateObjective(Objective):
    """A composed surrogate; two-stage tags read the frozen predictor outputs."""

    def __init__(self, spec: SurrogateSpec, data: TrainingData, frozen_predictor: Optional[np.ndarray] = None):
        super().__init__(data)
        self.spec = spec
        if spec.is_two_stage and frozen_predictor is None:
            raise InvalidConfigError(f"{spec.tag.value} needs the frozen first-stage outputs")
        self.frozen = frozen_predictor
        if frozen_predictor is not None:
            decided = system_decisions(None, frozen_predictor, None, data)
            self.frozen_base = decided.base_loss

    def _predictor(self, outputs):
        return self.frozen if self.spec.is_two_stage else outputs["predictor"]

    def loss_and_grads(self, outputs):
        tag = self.spec.tag
        d = self.data
        y, costs = d.y, d.costs
        P = self._predictor(outputs)
        R = outputs.get("rejector")
        m = P.shape[0]
        to_model: Dict[str, np.ndarray] = {}
        if tag in (SurrogateTag.ABSTAIN_L_MU, SurrogateTag.DEFER_SINGLE):
            inputs = {"scores": P, "y": y, "costs": costs}
            result = evaluate(self.spec, inputs)
            to_model["predictor"] = result.grad["scores"]
        elif tag == SurrogateTag.PR_SINGLE:
            result = evaluate(self.spec, {"h_scores": P, "r": R[:, 0], "y": y})
            to_model["predictor"] = result.grad["h_scores"]
            to_model["rejector"] = np.asarray(result.grad["r"])[:, None]
        elif tag in (SurrogateTag.REG_SINGLE, SurrogateTag.REG_SINGLE_EXPERT):
            pred = P[:, 0]
            L = regression_loss(d.loss, pred, y)
            if tag == SurrogateTag.REG_SINGLE:
                result = evaluate(self.spec, {"L_val": L, "r_scores": R, "costs": costs})
                to_model["rejector"] = result.grad["r_scores"]
            else:
                result = evaluate(self.spec, {"L_val": L, "r": R[:, 0], "c_val": costs[:, 0]})
                to_model["rejector"] = np.asarray(result.grad["r"])[:, None]
            chain = np.asarray(result.grad["L_val"]) * regression_loss_grad(d.loss, pred, y)
            to_model["predictor"] = chain[:, None]
        elif tag == SurrogateTag.ABSTAIN_TWO_STAGE:
            result = evaluate(self.spec, {"h_Y_scores": P, "h_extra": R[:, 0], "y": y, "c": costs[:, 0]})
            to_model["rejector"] = np.asarray(result.grad["h_extra"])[:, None]
        elif tag == SurrogateTag.PR_TWO_STAGE:
            result = evaluate(self.spec, {"misclassified": self.frozen_base, "r": R[:, 0], "c": costs[:, 0]})
            to_model["rejector"] = np.asarray(result.grad["r"])[:, None]
        elif tag == SurrogateTag.DEFER_TWO_STAGE_SCORE:
            inputs = {"hp_max": P.max(axis=1), "hd_scores": R, "correct": 1.0 - self.frozen_base, "cbar": 1.0 - costs}
            result = evaluate(self.spec, inputs)
            to_model["rejector"] = result.grad["hd_scores"]
        elif tag == SurrogateTag.DEFER_TWO_STAGE_PR:
            inputs = {"r_scores": R, "correct": 1.0 - self.frozen_base, "cbar": 1.0 - costs}
            result = evaluate(self.spec, inputs)
            to_model["rejector"] = result.grad["r_scores"]
        else:
            result = evaluate(self.spec, {"L_val": self.frozen_base, "r_scores": R, "costs": costs})
            to_model["rejector"] = result.grad["r_scores"]
        value = float(np.mean(result.value))
        return value, {k: v / m for k, v in to_model.items()}

    def target_loss(self, outputs):
        decisions = system_decisions(self.spec, self._predictor(outputs), outputs.get("rejector"), self.data)
        return float(np.mean(target_losses(decisions, self.data)))


def _all_finite(arrays) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


def fit(
    models: Dict[str, Model],
    objective: Objective,
    optimizer: OptimizerSpec,
    trainable: Optional[Sequence[str]] = None,
    stage: str = "fit",
) -> FitResult:
    """Full-batch gradient descent on ``objective``.

    The trace has one row per epoch, starting with the initialisation at
    epoch 0; a zero-epoch fit returns the models untouched.

    Raises:
        TrainingDivergedError: When the loss or a gradient stops being finite.
    """
    trainable = list(models) if trainable is None else list(trainable)
    X = objective.data.X
    velocity = {name: {k: np.zeros_like(v) for k, v in models[name].params.items()} for name in trainable}
    trace: List[TraceRow] = []
    last_finite: Optional[float] = None
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for epoch in range(optimizer.epochs + 1):
            passes = {name: model.forward(X) for name, model in models.items()}
            outputs = {name: out for name, (out, _) in passes.items()}
            loss, out_grads = objective.loss_and_grads(outputs)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"{stage}: loss is not finite", epoch, last_finite)
            last_finite = loss
            trace.append(TraceRow(stage, epoch, loss, objective.target_loss(outputs)))
            if epoch == optimizer.epochs:
                break
            for name in trainable:
                grads = models[name].backward(passes[name][1], out_grads[name])
                if not _all_finite(grads.values()):
                    raise TrainingDivergedError(f"{stage}: gradient of {name} is not finite", epoch, last_finite)
                params = models[name].params
                for key, g in grads.items():
                    if optimizer.kind == OptimizerKind.GD_MOMENTUM:
                        velocity[name][key] = optimizer.momentum * velocity[name][key] + g
                        g = velocity[name][key]
                    params[key] = params[key] - optimizer.lr * g
    result = FitResult(trace=trace, initial_loss=trace[0].surrogate_loss, final_loss=trace[-1].surrogate_loss)
    if not result.converged:
        logger.warning("%s did not converge: loss %.6g -> %.6g", stage, result.initial_loss, result.final_loss)
    logger.debug("%s: %d epochs, loss %.6g -> %.6g", stage, optimizer.epochs, result.initial_loss, result.final_loss)
    return result


# -- stages --------------------------------------------------------------------------


class Stage1Loss(str, Enum):
    LOGISTIC = "logistic"
    SQUARED = "squared"


def _seeds(seed: int, count: int) -> List[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def run_stage_one(
    dataset: Dataset,
    model_spec: ModelSpec,
    optimizer: OptimizerSpec,
    seed: int = 0,
    stage1: Stage1Loss = Stage1Loss.LOGISTIC,
    loss: RegressionLoss = RegressionLoss.SQUARED,
) -> Tuple[Model, FitResult]:
    """Train the predictor alone with a standard loss."""
    stage1 = Stage1Loss(stage1)
    if (stage1 == Stage1Loss.SQUARED) != dataset.is_regression:
        raise InvalidConfigError(f"stage-one loss {stage1.value} does not fit this dataset")
    data = TrainingData(X=np.asarray(dataset.X, dtype=float), y=dataset.y, costs=None,
                        expert_outputs=dataset.expert_outputs, n_classes=dataset.n_classes, loss=loss)
    width = 1 if dataset.is_regression else dataset.n_classes
    predictor = build_model(model_spec.resolved(dataset.n_features, width, _seeds(seed, 2)[0]))
    objective = RegressionObjective(data) if dataset.is_regression else ClassificationObjective(data)
    result = fit({"predictor": predictor}, objective, optimizer, stage="stage_one")
    return predictor, result


def run_stage_two(
    dataset: Dataset,
    predictor: Model,
    spec: SurrogateSpec,
    model_spec: ModelSpec,
    cost_model: Optional[CostModel],
    optimizer: OptimizerSpec,
    seed: int = 0,
) -> Tuple[Model, FitResult]:
    """Train deferral scores from zero against a frozen predictor."""
    if spec.tag not in TWO_STAGE_TAGS:
        raise InvalidConfigError(f"{spec.tag.value} is not a second-stage surrogate")
    data = TrainingData.build(dataset, spec, cost_model)
    width = output_layout(spec, dataset.n_classes, data.n_experts)["rejector"]
    rejector = build_model(model_spec.resolved(dataset.n_features, width, _seeds(seed, 2)[1]))
    rejector.zero_output()
    objective = SurrogateObjective(spec, data, frozen_predictor=predictor.predict(data.X))
    result = fit({"rejector": rejector}, objective, optimizer, stage="stage_two")
    return rejector, result


def run_single_stage(
    dataset: Dataset,
    spec: Optional[SurrogateSpec],
    model_spec: ModelSpec,
    cost_model: Optional[CostModel],
    optimizer: OptimizerSpec,
    seed: int = 0,
) -> Tuple[Dict[str, Model], FitResult]:
    """Train every score jointly; ``spec=None`` is plain classification or regression."""
    if spec is None:
        stage1 = Stage1Loss.SQUARED if dataset.is_regression else Stage1Loss.LOGISTIC
        loss = cost_model.loss if cost_model is not None else RegressionLoss.SQUARED
        predictor, result = run_stage_one(dataset, model_spec, optimizer, seed, stage1, loss)
        return {"predictor": predictor}, result
    if spec.tag in TWO_STAGE_TAGS:
        raise InvalidConfigError(f"{spec.tag.value} is trained by the two-stage pipeline")
    data = TrainingData.build(dataset, spec, cost_model)
    layout = output_layout(spec, dataset.n_classes, data.n_experts)
    seeds = _seeds(seed, 2)
    models = {
        name: build_model(model_spec.resolved(dataset.n_features, width, seeds[i]))
        for i, (name, width) in enumerate(layout.items())
    }
    result = fit(models, SurrogateObjective(spec, data), optimizer, stage="single_stage")
    return models, result


# -- evaluation ----------------------------------------------------------------------


@dataclass
class TrainedPair:
    """Predictor plus deferral scores and the record of how they were trained."""

    spec: Optional[SurrogateSpec]
    predictor: Model
    deferral: Optional[Model] = None
    stages: Tuple[str, ...] = ("single_stage",)
    trace: List[TraceRow] = field(default_factory=list)
    frozen_checksum: Optional[str] = None
    converged: bool = True


@dataclass(frozen=True)
class SystemMetrics:
    target_loss: float
    accuracy: Optional[float]
    mse: Optional[float]
    deferral_ratios: Tuple[float, ...]
    acceptance_error: float
    coverage: float

    def to_dict(self) -> dict:
        return {
            "target_loss": self.target_loss,
            "accuracy": self.accuracy,
            "mse": self.mse,
            "deferral_ratios": list(self.deferral_ratios),
            "acceptance_error": self.acceptance_error,
            "coverage": self.coverage,
        }


def evaluate_system(pair: TrainedPair, dataset: Dataset, cost_model: Optional[CostModel] = None) -> SystemMetrics:
    """Target loss, system accuracy or MSE, deferral ratios and acceptance-set error.

    Under the misclassification cost with ``alpha = 1`` and zero base cost the
    system accuracy equals one minus the mean deferral loss.
    """
    spec = pair.spec
    if spec is not None and spec.tag in ABSTENTION_TAGS:
        cost_model = None
    data = TrainingData.build(dataset, spec, cost_model)
    X = data.X
    P = pair.predictor.predict(X)
    R = pair.deferral.predict(X) if pair.deferral is not None else None
    decisions = system_decisions(spec, P, R, data)
    losses = target_losses(decisions, data)
    index = decisions.index
    n_routes = data.n_experts
    ratios = tuple(float(np.mean(index == j)) for j in range(1, n_routes + 1))
    accepted = index == 0
    acceptance_error = float(np.mean(decisions.base_loss[accepted])) if accepted.any() else 0.0
    accuracy = mse = None
    experts = dataset.expert_outputs
    routed_to_expert = experts is not None and (spec is None or spec.tag not in ABSTENTION_TAGS)
    if dataset.is_regression:
        output = decisions.prediction.astype(float)
        if routed_to_expert:
            chosen = np.take_along_axis(experts, np.maximum(index - 1, 0)[:, None], axis=1)[:, 0]
            output = np.where(accepted, output, chosen)
        mse = float(np.mean((output - dataset.y) ** 2))
    elif spec is None or spec.tag not in ABSTENTION_TAGS:
        correct = decisions.prediction == dataset.y
        if routed_to_expert:
            chosen = np.take_along_axis(experts, np.maximum(index - 1, 0)[:, None], axis=1)[:, 0]
            correct = np.where(accepted, correct, chosen == dataset.y)
        accuracy = float(np.mean(correct))
    return SystemMetrics(
        target_loss=float(np.mean(losses)),
        accuracy=accuracy,
        mse=mse,
        deferral_ratios=ratios,
        acceptance_error=acceptance_error,
        coverage=float(np.mean(accepted)),
    )
