"""
Label-space conventions, score containers, cost models and discrete
distributions shared by the rest of the package.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError, InvalidParameterError

SIMPLEX_TOL = 1e-12


class Mode(str, Enum):
    ABSTENTION = "abstention"
    DEFERRAL_CLASSIFICATION = "deferral_classification"
    DEFERRAL_REGRESSION = "deferral_regression"


class Formulation(str, Enum):
    SCORE = "score"
    PREDICTOR_REJECTOR = "predictor_rejector"


class RejectorConvention(str, Enum):
    """How rejector scores are turned into a deferral index.

    ``argmax_defer`` reads scores ``r_0..r_{n_e}`` and routes to the argmax.
    ``argmin_defer`` reads ``r_1..r_{n_e}`` with an implicit ``r_0 = 0`` and
    defers to the smallest non-positive score.
    """

    ARGMAX_DEFER = "argmax_defer"
    ARGMIN_DEFER = "argmin_defer"


def as_finite_vector(values, name: str = "scores") -> np.ndarray:
    """Convert to a 1-D float array, rejecting empty or non-finite input."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidInputError(f"{name} must be a non-empty vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class LabelSpace:
    """Class count, expert count and the augmented index layout."""

    n: int
    n_e: int
    mode: Mode

    def __post_init__(self):
        if self.n_e < 0:
            raise InvalidParameterError(f"n_e must be non-negative, got {self.n_e}")
        if self.mode != Mode.DEFERRAL_REGRESSION and self.n < 2:
            raise InvalidParameterError(f"classification needs n >= 2, got {self.n}")
        if self.mode != Mode.ABSTENTION and self.n_e < 1:
            raise InvalidParameterError("deferral modes need at least one expert")
        if self.mode == Mode.ABSTENTION and self.n_e != 1:
            raise InvalidParameterError("abstention is the single-expert case (n_e = 1)")

    @classmethod
    def abstention(cls, n: int) -> "LabelSpace":
        return cls(n=n, n_e=1, mode=Mode.ABSTENTION)

    @property
    def augmented_length(self) -> int:
        if self.mode == Mode.ABSTENTION:
            return self.n + 1
        return self.n + self.n_e

    @property
    def rejector_length(self) -> int:
        return self.n_e + 1

    def abstain_label(self) -> int:
        """Zero-based index of the abstain label in an augmented score vector."""
        return self.n

    def expert_label(self, j: int) -> int:
        """Zero-based index of expert ``j`` (1-based) in an augmented score vector."""
        if not 1 <= j <= self.n_e:
            raise InvalidInputError(f"expert index {j} outside 1..{self.n_e}")
        return self.n + j - 1


@dataclass(frozen=True)
class ScoreBundle:
    """Per-input scores of a predictor, a rejector and a regression output."""

    h_scores: Optional[np.ndarray] = None
    r_scores: Optional[np.ndarray] = None
    h_value: Optional[float] = None

    def __post_init__(self):
        if self.h_scores is not None:
            object.__setattr__(self, "h_scores", as_finite_vector(self.h_scores, "h_scores"))
        if self.r_scores is not None:
            object.__setattr__(self, "r_scores", as_finite_vector(self.r_scores, "r_scores"))
        if self.h_value is not None and not np.isfinite(self.h_value):
            raise InvalidInputError("h_value must be finite")

    def validate(
        self,
        space: LabelSpace,
        formulation: Formulation,
        convention: RejectorConvention = RejectorConvention.ARGMAX_DEFER,
    ) -> "ScoreBundle":
        """Check vector lengths against the label space; returns self."""
        if formulation == Formulation.SCORE:
            if self.h_scores is None or self.h_scores.size != space.augmented_length:
                raise InvalidInputError(
                    f"score-based {space.mode.value} needs {space.augmented_length} scores"
                )
            return self
        if space.mode == Mode.DEFERRAL_REGRESSION:
            if self.h_value is None:
                raise InvalidInputError("regression deferral needs h_value")
        elif self.h_scores is None or self.h_scores.size != space.n:
            raise InvalidInputError(f"predictor needs {space.n} class scores")
        expected = space.rejector_length if convention == RejectorConvention.ARGMAX_DEFER else space.n_e
        if space.mode == Mode.ABSTENTION:
            expected = 1
        if self.r_scores is None or self.r_scores.size != expected:
            raise InvalidInputError(f"rejector needs {expected} scores")
        return self


def predict_label(scores) -> int:
    """Return the argmax index; ties go to the lowest index."""
    return int(np.argmax(as_finite_vector(scores)))


def predict_labels(scores: np.ndarray) -> np.ndarray:
    """Row-wise :func:`predict_label` for a 2-D score matrix."""
    return np.argmax(np.asarray(scores, dtype=float), axis=-1)


def rejector_decision(
    r_scores,
    convention: RejectorConvention = RejectorConvention.ARGMAX_DEFER,
    n_e: Optional[int] = None,
) -> int:
    """Map rejector scores to a deferral index in ``0..n_e`` (0 keeps the prediction).

    Args:
        r_scores: ``r_0..r_{n_e}`` for ``argmax_defer``; ``r_1..r_{n_e}`` for
            ``argmin_defer`` (``r_0`` is fixed at zero).
        convention: Rejector convention.
        n_e: Expected expert count; checked against the vector length when given.

    Returns:
        The selected index.

    Raises:
        InvalidInputError: On a length mismatch or malformed scores.
    """
    r = as_finite_vector(r_scores, "r_scores")
    convention = RejectorConvention(convention)
    if n_e is not None:
        expected = n_e + 1 if convention == RejectorConvention.ARGMAX_DEFER else n_e
        if r.size != expected:
            raise InvalidInputError(f"expected {expected} rejector scores for n_e={n_e}, got {r.size}")
    return int(rejector_decisions(r[None, :], convention)[0])


def rejector_decisions(r_scores: np.ndarray, convention: RejectorConvention) -> np.ndarray:
    """Vectorised :func:`rejector_decision` over the rows of ``r_scores``."""
    r = np.atleast_2d(np.asarray(r_scores, dtype=float))
    if RejectorConvention(convention) == RejectorConvention.ARGMAX_DEFER:
        return np.argmax(r, axis=-1)
    j = np.argmin(r, axis=-1)
    best = np.take_along_axis(r, j[:, None], axis=-1)[:, 0]
    return np.where(best <= 0.0, j + 1, 0)


class CostKind(str, Enum):
    CONSTANT = "constant"
    EXPERT_MISCLASSIFICATION = "expert_misclassification"
    REGRESSION_EXPERT = "regression_expert"


class RegressionLoss(str, Enum):
    SQUARED = "squared"
    ABSOLUTE = "absolute"


def regression_loss(tag: RegressionLoss, prediction, target) -> np.ndarray:
    diff = np.asarray(prediction, dtype=float) - np.asarray(target, dtype=float)
    if RegressionLoss(tag) == RegressionLoss.SQUARED:
        return diff * diff
    return np.abs(diff)


def regression_loss_grad(tag: RegressionLoss, prediction, target) -> np.ndarray:
    """Derivative of :func:`regression_loss` in the prediction (0 at the kink)."""
    diff = np.asarray(prediction, dtype=float) - np.asarray(target, dtype=float)
    if RegressionLoss(tag) == RegressionLoss.SQUARED:
        return 2.0 * diff
    return np.sign(diff)


@dataclass(frozen=True)
class CostModel:
    """Per-expert deferral costs and their declared bounds."""

    kind: CostKind
    n_e: int
    c: Optional[float] = None
    alpha: Tuple[float, ...] = ()
    beta: Tuple[float, ...] = ()
    loss: RegressionLoss = RegressionLoss.SQUARED
    loss_bound: Optional[float] = None
    bounds: Tuple[Tuple[float, float], ...] = field(default=())

    @classmethod
    def constant(cls, c: float, n_e: int = 1) -> "CostModel":
        if not 0.0 < c < 1.0:
            raise InvalidParameterError(f"constant abstention cost must lie in (0, 1), got {c}")
        return cls(kind=CostKind.CONSTANT, n_e=n_e, c=float(c), bounds=((float(c), float(c)),) * n_e)

    @classmethod
    def expert_misclassification(
        cls,
        alpha: Sequence[float],
        beta: Sequence[float],
        expert_table: Optional[np.ndarray] = None,
        labels: Optional[np.ndarray] = None,
    ) -> "CostModel":
        """Costs ``alpha_j * 1{g_j(x) != y} + beta_j``.

        When a finite expert table and its labels are given, the bounds are
        tightened to the costs actually realised on that table.
        """
        alpha = tuple(float(a) for a in alpha)
        beta = tuple(float(b) for b in beta)
        if len(alpha) != len(beta) or not alpha:
            raise InvalidParameterError("alpha and beta need one entry per expert")
        if min(alpha) < 0 or min(beta) < 0:
            raise InvalidParameterError("alpha and beta must be non-negative")
        bounds = tuple((b, a + b) for a, b in zip(alpha, beta))
        if expert_table is not None and labels is not None:
            table = np.asarray(expert_table)
            wrong = table != np.asarray(labels)[:, None]
            bounds = tuple(
                (
                    b + a * float(wrong[:, j].min()),
                    b + a * float(wrong[:, j].max()),
                )
                for j, (a, b) in enumerate(zip(alpha, beta))
            )
        return cls(
            kind=CostKind.EXPERT_MISCLASSIFICATION,
            n_e=len(alpha),
            alpha=alpha,
            beta=beta,
            bounds=bounds,
        )

    @classmethod
    def regression_expert(
        cls,
        alpha: Sequence[float],
        loss_bound: float,
        loss: RegressionLoss = RegressionLoss.SQUARED,
    ) -> "CostModel":
        """Costs ``L(g_j(x), y) + alpha_j`` with ``L`` bounded by ``loss_bound``."""
        alpha = tuple(float(a) for a in alpha)
        if not alpha or min(alpha) < 0:
            raise InvalidParameterError("alpha needs one non-negative entry per expert")
        if loss_bound <= 0:
            raise InvalidParameterError("loss_bound must be positive")
        return cls(
            kind=CostKind.REGRESSION_EXPERT,
            n_e=len(alpha),
            alpha=alpha,
            loss=RegressionLoss(loss),
            loss_bound=float(loss_bound),
            bounds=tuple((a, loss_bound + a) for a in alpha),
        )

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.bounds])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.bounds])

    @property
    def has_zero_base_cost(self) -> bool:
        if self.kind == CostKind.EXPERT_MISCLASSIFICATION:
            return all(b == 0.0 for b in self.beta)
        if self.kind == CostKind.REGRESSION_EXPERT:
            return all(a == 0.0 for a in self.alpha)
        return False

    def cost_matrix(self, expert_outputs: Optional[np.ndarray], y: np.ndarray) -> np.ndarray:
        """Costs for a batch: returns shape ``(m, n_e)``."""
        y = np.asarray(y)
        m = y.shape[0]
        if self.kind == CostKind.CONSTANT:
            return np.full((m, self.n_e), self.c)
        if expert_outputs is None:
            raise InvalidInputError(f"{self.kind.value} costs need expert outputs")
        g = np.asarray(expert_outputs)
        if g.ndim != 2 or g.shape[0] != m or g.shape[1] != self.n_e:
            raise InvalidInputError(
                f"expert outputs must have shape ({m}, {self.n_e}), got {g.shape}"
            )
        if self.kind == CostKind.EXPERT_MISCLASSIFICATION:
            costs = np.asarray(self.alpha) * (g != y[:, None]) + np.asarray(self.beta)
        else:
            losses = regression_loss(self.loss, g, y[:, None])
            if np.any(losses > self.loss_bound + 1e-12):
                raise InvalidInputError("expert regression loss exceeds the declared bound")
            costs = losses + np.asarray(self.alpha)
        if np.any(costs < self.lower - 1e-12) or np.any(costs > self.upper + 1e-12):
            raise InvalidInputError("evaluated cost outside the declared bounds")
        return costs


def eval_cost(model: CostModel, expert_outputs, x_id: int, y) -> np.ndarray:
    """Per-expert cost vector at input ``x_id`` with label ``y``.

    Args:
        model: Cost model.
        expert_outputs: Table of expert outputs indexed ``[x_id, j]``; may be
            ``None`` for constant costs.
        x_id: Input id (row of the table).
        y: Label (class index or regression target).

    Returns:
        Array of length ``n_e``.

    Raises:
        InvalidInputError: If expert outputs are missing or a cost leaves its bounds.
    """
    if model.kind == CostKind.CONSTANT:
        return np.full(model.n_e, model.c)
    if expert_outputs is None:
        raise InvalidInputError(f"{model.kind.value} costs need expert outputs")
    table = np.asarray(expert_outputs)
    if table.ndim == 1:
        table = table[None, :]
        x_id = 0
    if not 0 <= x_id < table.shape[0]:
        raise InvalidInputError(f"no expert outputs for input {x_id}")
    row = table[x_id]
    if row.shape[0] != model.n_e:
        raise InvalidInputError(f"expected {model.n_e} expert outputs, got {row.shape[0]}")
    return model.cost_matrix(row[None, :], np.asarray([y]))[0]


@dataclass(frozen=True)
class DiscreteDistribution:
    """Finite input set with marginal weights and conditional label rows."""

    cond_probs: np.ndarray
    weights: np.ndarray
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.cond_probs, dtype=float))
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.shape[0] != p.shape[0]:
            raise InvalidInputError("need one weight per input")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > SIMPLEX_TOL):
            raise InvalidInputError("conditional rows must lie on the probability simplex")
        if np.any(w < 0) or abs(w.sum() - 1.0) > SIMPLEX_TOL:
            raise InvalidInputError("input weights must lie on the probability simplex")
        if self.features is not None and len(self.features) != p.shape[0]:
            raise InvalidInputError("need one feature vector per input")
        object.__setattr__(self, "cond_probs", p)
        object.__setattr__(self, "weights", w)

    @property
    def n_points(self) -> int:
        return self.cond_probs.shape[0]

    @property
    def n_labels(self) -> int:
        return self.cond_probs.shape[1]

    @property
    def is_deterministic(self) -> bool:
        return bool(np.all(np.isclose(self.cond_probs.max(axis=1), 1.0)))

    def point_ids(self) -> range:
        return range(self.n_points)
