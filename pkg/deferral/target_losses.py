"""
Exact target losses for abstention and deferral, and the algebraic
rewrite of the deferral loss used by the regression surrogates.

All functions accept either a single input or a leading batch axis.
"""

from enum import Enum
from typing import Optional

import numpy as np

from .core import (
    RejectorConvention,
    ScoreBundle,
    predict_labels,
    rejector_decisions,
)
from .errors import InvalidInputError, InvalidParameterError


class TargetLossKind(str, Enum):
    ABSTAIN_SCORE = "abstain_score"
    ABSTAIN_PR = "abstain_pr"
    DEFER_SCORE = "defer_score"
    DEFER_PR = "defer_pr"
    DEFER_REGRESSION = "defer_regression"


def _check_cost(c: float):
    if not 0.0 < c < 1.0:
        raise InvalidInputError(f"abstention cost must lie in (0, 1), got {c}")


def _squeeze(values: np.ndarray, single: bool):
    return float(values[0]) if single else values


def abstention_decisions(scores) -> np.ndarray:
    """Decision for ``n+1`` scores: ``n`` means abstain, which wins ties."""
    s = np.atleast_2d(np.asarray(scores, dtype=float))
    n = s.shape[1] - 1
    if n < 1:
        raise InvalidInputError("abstention scores need at least one class and the abstain label")
    abstain = s[:, n] >= s[:, :n].max(axis=1)
    return np.where(abstain, n, predict_labels(s[:, :n]))


def abstention_loss_score(scores, y, c: float):
    """Score-based abstention loss ``1{h != y}1{h != n+1} + c 1{h = n+1}``."""
    _check_cost(c)
    single = np.ndim(scores) == 1
    s = np.atleast_2d(np.asarray(scores, dtype=float))
    y = np.atleast_1d(np.asarray(y))
    decision = abstention_decisions(s)
    abstain = decision == s.shape[1] - 1
    loss = np.where(abstain, c, (decision != y).astype(float))
    return _squeeze(loss, single)


def abstention_loss_pr(h_scores, r, y, c: float):
    """Predictor-rejector abstention loss; ``r <= 0`` rejects."""
    _check_cost(c)
    single = np.ndim(h_scores) == 1
    h = np.atleast_2d(np.asarray(h_scores, dtype=float))
    r = np.atleast_1d(np.asarray(r, dtype=float))
    y = np.atleast_1d(np.asarray(y))
    wrong = (predict_labels(h) != y).astype(float)
    loss = np.where(r > 0, wrong, c)
    return _squeeze(loss, single)


def score_deferral_loss(scores, y, costs, n: int):
    """``1{h != y}1{h in [n]} + sum_j c_j 1{h = n+j}`` over ``n + n_e`` scores."""
    single = np.ndim(scores) == 1
    s = np.atleast_2d(np.asarray(scores, dtype=float))
    costs = np.atleast_2d(np.asarray(costs, dtype=float))
    y = np.atleast_1d(np.asarray(y))
    n_e = s.shape[1] - n
    if costs.shape[1] != n_e:
        raise InvalidInputError(f"expected {n_e} costs, got {costs.shape[1]}")
    decision = predict_labels(s)
    deferred = decision >= n
    expert = np.clip(decision - n, 0, max(n_e - 1, 0))
    deferral_cost = np.take_along_axis(costs, expert[:, None], axis=1)[:, 0] if n_e else 0.0
    loss = np.where(deferred, deferral_cost, (decision != y).astype(float))
    return _squeeze(loss, single)


def routed_loss(base_loss, costs, deferral_index):
    """Base loss when the index is 0, otherwise the cost of the selected expert."""
    single = np.ndim(deferral_index) == 0
    base = np.atleast_1d(np.asarray(base_loss, dtype=float))
    costs = np.atleast_2d(np.asarray(costs, dtype=float))
    idx = np.atleast_1d(np.asarray(deferral_index))
    if np.any(idx < 0) or np.any(idx > costs.shape[1]):
        raise InvalidInputError(f"deferral index outside 0..{costs.shape[1]}")
    chosen = np.take_along_axis(costs, np.maximum(idx - 1, 0)[:, None], axis=1)[:, 0]
    loss = np.where(idx == 0, base, chosen)
    return _squeeze(loss, single)


def deferral_loss(
    kind: TargetLossKind,
    bundle: ScoreBundle,
    y,
    costs,
    base_loss: Optional[float] = None,
    convention: RejectorConvention = RejectorConvention.ARGMAX_DEFER,
) -> float:
    """Deferral loss of a single input.

    Args:
        kind: ``defer_score``, ``defer_pr`` or ``defer_regression``.
        bundle: Scores of the input. ``defer_score`` reads ``h_scores`` of
            length ``n + n_e``; the other kinds read ``r_scores``.
        y: Class label (ignored for regression).
        costs: Expert costs, length ``n_e``.
        base_loss: ``L(h(x), y)``; required for ``defer_regression``.
        convention: Rejector convention for the predictor-rejector kinds.

    Returns:
        The loss value.

    Raises:
        InvalidInputError: On missing scores or a cost-length mismatch.
    """
    kind = TargetLossKind(kind)
    costs = np.asarray(costs, dtype=float)
    if costs.ndim != 1:
        raise InvalidInputError("costs must be a vector")
    n_e = costs.size
    if kind == TargetLossKind.DEFER_SCORE:
        if bundle.h_scores is None:
            raise InvalidInputError("defer_score needs h_scores")
        n = bundle.h_scores.size - n_e
        if n < 1:
            raise InvalidInputError("score vector shorter than the expert count")
        return score_deferral_loss(bundle.h_scores, y, costs, n)
    if kind not in (TargetLossKind.DEFER_PR, TargetLossKind.DEFER_REGRESSION):
        raise InvalidParameterError(f"{kind.value} is not a deferral loss")
    if bundle.r_scores is None:
        raise InvalidInputError(f"{kind.value} needs r_scores")
    expected = n_e + 1 if RejectorConvention(convention) == RejectorConvention.ARGMAX_DEFER else n_e
    if bundle.r_scores.size != expected:
        raise InvalidInputError(f"expected {expected} rejector scores, got {bundle.r_scores.size}")
    index = int(rejector_decisions(bundle.r_scores[None, :], convention)[0])
    if kind == TargetLossKind.DEFER_REGRESSION:
        if base_loss is None:
            raise InvalidInputError("defer_regression needs the base loss value")
        base = float(base_loss)
    else:
        if bundle.h_scores is None:
            raise InvalidInputError("defer_pr needs h_scores")
        base = float(predict_labels(bundle.h_scores[None, :])[0] != y)
    return routed_loss(base, costs, index)


def deferral_loss_rewrite(base_loss, costs, deferral_index):
    """Rewritten deferral loss.

    ``[sum c] 1{r != 0} + sum_j [L + sum_{k != j} c_k] 1{r != j} - (n_e - 1)[L + sum c]``
    which equals :func:`routed_loss` for every index.
    """
    single = np.ndim(deferral_index) == 0
    base = np.atleast_1d(np.asarray(base_loss, dtype=float))
    costs = np.atleast_2d(np.asarray(costs, dtype=float))
    idx = np.atleast_1d(np.asarray(deferral_index))
    n_e = costs.shape[1]
    if n_e < 1:
        raise InvalidInputError("the rewrite needs at least one expert")
    total = costs.sum(axis=1)
    labels = np.arange(1, n_e + 1)
    weights = base[:, None] + total[:, None] - costs
    value = total * (idx != 0)
    value = value + (weights * (idx[:, None] != labels[None, :])).sum(axis=1)
    value = value - (n_e - 1) * (base + total)
    return _squeeze(value, single)
