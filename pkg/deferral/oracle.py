"""
Exact conditional risks, Bayes decisions, minimizability gaps, Gamma
evaluators and numeric verification of consistency-bound inequalities on
finite instances.
"""

import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import minimize, minimize_scalar

from .base_losses import MulticlassFamily, weighted_family
from .core import SIMPLEX_TOL, DiscreteDistribution
from .errors import InvalidInputError, InvalidParameterError
from .surrogates import TRAINABLE, SurrogateSpec, evaluate

logger = logging.getLogger(__name__)


def _simplex(p, name: str = "p") -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise InvalidInputError(f"{name} must be a non-empty vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise InvalidInputError(f"{name} must lie on the probability simplex")
    return p


# -- conditional risks and Bayes rules ---------------------------------------


def conditional_risk(loss_fn: Callable[[int], float], p) -> float:
    """``sum_y p(y|x) loss(y)`` for a loss already bound to a decision or scores."""
    p = _simplex(p)
    return float(sum(p[y] * float(loss_fn(y)) for y in range(p.size)))


@dataclass(frozen=True)
class BayesDecision:
    decision: int
    risk: float
    defers: bool = False


@dataclass(frozen=True)
class QVector:
    """Augmented weights ``q = (p, 1 - E[c_1], ..., 1 - E[c_{n_e}])``."""

    values: np.ndarray
    normalizer: float

    @property
    def normalized(self) -> np.ndarray:
        return self.values / self.normalizer


def build_q_vector(p, expected_costs) -> QVector:
    p = _simplex(p)
    costs = np.asarray(expected_costs, dtype=float).ravel()
    if np.any(costs < 0) or np.any(costs > 1):
        raise InvalidInputError("expected costs must lie in [0, 1]")
    q = np.concatenate([p, 1.0 - costs])
    return QVector(values=q, normalizer=float(q.sum()))


def bayes_abstention(p, c: float) -> BayesDecision:
    """Best action among the ``n`` labels and abstention (which wins ties)."""
    p = _simplex(p)
    if not 0.0 < c < 1.0:
        raise InvalidInputError(f"abstention cost must lie in (0, 1), got {c}")
    best = int(np.argmax(p))
    if 1.0 - c >= p[best]:
        return BayesDecision(decision=p.size, risk=float(c), defers=True)
    return BayesDecision(decision=best, risk=float(1.0 - p[best]))


def bayes_deferral(p, expected_costs) -> BayesDecision:
    """Argmax of the q-vector with lowest-index ties; risk ``1 - max q``."""
    q = build_q_vector(p, expected_costs)
    best = int(np.argmax(q.values))
    return BayesDecision(
        decision=best,
        risk=float(1.0 - q.values[best]),
        defers=best >= len(np.atleast_1d(p)),
    )


def bayes_pr_abstention(p, c: float, allowed_labels: Optional[Sequence[int]] = None) -> BayesDecision:
    """Predictor-rejector Bayes risk ``1 - max(max_{y in H(x)} p_y, 1 - c)``.

    Args:
        p: Conditional label distribution.
        c: Abstention cost.
        allowed_labels: Zero-based labels the predictor class can output at
            this input; all labels when omitted.
    """
    p = _simplex(p)
    labels = np.arange(p.size) if allowed_labels is None else np.asarray(sorted(allowed_labels), dtype=int)
    if labels.size == 0 or labels.min() < 0 or labels.max() >= p.size:
        raise InvalidInputError("allowed labels must be a non-empty subset of the label set")
    best = int(labels[np.argmax(p[labels])])
    if 1.0 - c >= p[best]:
        return BayesDecision(decision=p.size, risk=float(c), defers=True)
    return BayesDecision(decision=best, risk=float(1.0 - p[best]))


# -- pointwise infima ----------------------------------------------------------


def comp_sum_infimum(weights, mu: float) -> float:
    """``inf_s sum_k w_k l_mu(s, k)`` over the open simplex of softmax vectors."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise InvalidInputError("weights must be non-negative")
    total = float(w.sum())
    if total == 0.0:
        return 0.0
    w = w[w > 0]
    if mu >= 2.0:
        return (total - float(w.max())) / (mu - 1.0)
    if mu == 1.0:
        return float(-(w * np.log(w / total)).sum())
    power = 1.0 / (2.0 - mu)
    return float(((w ** power).sum() ** (2.0 - mu) - total) / (1.0 - mu))


def min_gap_closed_form(mu: float, c: float) -> float:
    """Pointwise infimum of the conditional ``L_mu`` risk for a deterministic label.

    The closed form for ``mu < 2`` reads
    ``(1/(1-mu)) ([1 + (1-c)^{1/(2-mu)}]^{2-mu} - (2-c))``; for ``mu >= 2``
    the risk is concave in the softmax, the infimum sits at the vertex of the
    true label and equals ``(1-c)/(mu-1)`` (``1-c`` at ``mu = 2``).
    """
    if mu < 0:
        raise InvalidParameterError(f"mu must be non-negative, got {mu}")
    if not 0.0 < c < 1.0:
        raise InvalidParameterError(f"abstention cost must lie in (0, 1), got {c}")
    if mu == 2.0:
        return 1.0 - c
    if mu == 1.0:
        return float(-np.log(1.0 / (2.0 - c)) - (1.0 - c) * np.log((1.0 - c) / (2.0 - c)))
    if mu > 2.0:
        return (1.0 - c) / (mu - 1.0)
    return float(((1.0 + (1.0 - c) ** (1.0 / (2.0 - mu))) ** (2.0 - mu) - (2.0 - c)) / (1.0 - mu))


def _comp_sum_term(s: np.ndarray, mu: float) -> np.ndarray:
    with np.errstate(divide="ignore", over="ignore"):
        if mu == 1.0:
            return -np.log(s)
        return (np.power(s, mu - 1.0) - 1.0) / (1.0 - mu)


def numeric_min_gap(mu: float, c: float, grid_points: int = 20001) -> float:
    """Numerical infimum of the same conditional risk.

    Mass placed on labels with zero weight only increases the risk, so the
    simplex reduces to the segment between the true label and abstention.
    """

    def risk(t):
        t = np.asarray(t, dtype=float)
        return _comp_sum_term(t, mu) + (1.0 - c) * _comp_sum_term(1.0 - t, mu)

    t = np.linspace(0.0, 1.0, grid_points)
    with np.errstate(invalid="ignore"):
        values = risk(t)
    values = np.where(np.isfinite(values), values, np.inf)
    best = float(values.min())
    i = int(np.argmin(values))
    lo, hi = t[max(i - 1, 0)], t[min(i + 1, grid_points - 1)]
    if hi > lo:
        res = minimize_scalar(lambda x: float(risk(x)), bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-12})
        if np.isfinite(res.fun):
            best = min(best, float(res.fun))
    return best


@dataclass(frozen=True)
class ScoreGrid:
    """Per-input score grid on ``[low, high]``."""

    low: float = -5.0
    high: float = 5.0
    resolution: float = 0.25

    def __post_init__(self):
        if self.resolution <= 0 or self.high <= self.low:
            raise InvalidParameterError("grid needs low < high and a positive resolution")

    @property
    def values(self) -> np.ndarray:
        count = int(round((self.high - self.low) / self.resolution)) + 1
        return np.linspace(self.low, self.high, count)

    @property
    def size(self) -> int:
        return self.values.size


def grid_minimize(
    objective: Callable[[np.ndarray], np.ndarray],
    dim: int,
    grid: ScoreGrid,
    fixed: Optional[Dict[int, float]] = None,
    max_points: int = 250_000,
    max_sweeps: int = 50,
) -> Tuple[np.ndarray, float]:
    """Minimise a batched objective over grid points of ``R^dim``.

    Exhaustive when the grid has at most ``max_points`` points in the free
    coordinates, cyclic coordinate descent on the grid otherwise.

    Args:
        objective: Maps ``(B, dim)`` points to ``(B,)`` values.
        dim: Number of coordinates.
        grid: Grid of admissible values per coordinate.
        fixed: Coordinates held at a given value.
        max_points: Budget for exhaustive enumeration.
        max_sweeps: Maximum coordinate-descent sweeps.

    Returns:
        Tuple of the best point and its value.
    """
    fixed = dict(fixed or {})
    free = [i for i in range(dim) if i not in fixed]
    values = grid.values
    base = np.zeros(dim)
    for i, v in fixed.items():
        base[i] = v
    if not free:
        return base, float(objective(base[None, :])[0])
    if values.size ** len(free) <= max_points:
        best_point, best_value = base, np.inf
        combos = itertools.product(values, repeat=len(free))
        while True:
            chunk = np.array(list(itertools.islice(combos, 50_000)))
            if chunk.size == 0:
                break
            points = np.tile(base, (chunk.shape[0], 1))
            points[:, free] = chunk
            vals = objective(points)
            j = int(np.argmin(vals))
            if vals[j] < best_value:
                best_value, best_point = float(vals[j]), points[j].copy()
        return best_point, best_value
    point = base.copy()
    point[free] = values[int(np.argmin(np.abs(values)))]
    current = float(objective(point[None, :])[0])
    for _ in range(max_sweeps):
        improved = False
        for i in free:
            candidates = np.tile(point, (values.size, 1))
            candidates[:, i] = values
            vals = objective(candidates)
            j = int(np.argmin(vals))
            if vals[j] < current - 1e-15:
                current, point = float(vals[j]), candidates[j].copy()
                improved = True
        if not improved:
            break
    return point, current


def weighted_objective(family: MulticlassFamily, weights: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Batched ``h -> sum_k w_k l(h, k)`` for a single input's weights."""
    w = np.asarray(weights, dtype=float)

    def objective(points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        value, _ = weighted_family(family, points, np.tile(w, (points.shape[0], 1)))
        return value

    return objective


def refine_minimum(
    family: MulticlassFamily,
    weights: np.ndarray,
    start: np.ndarray,
    fixed: Optional[Dict[int, float]] = None,
) -> Tuple[np.ndarray, float]:
    """Continuous local refinement of a grid minimum with L-BFGS."""
    fixed = dict(fixed or {})
    w = np.asarray(weights, dtype=float)
    free = [i for i in range(start.size) if i not in fixed]
    if not free:
        return start, float(weighted_objective(family, w)(start[None, :])[0])

    def fun(z):
        point = start.copy()
        point[free] = z
        value, grad = weighted_family(family, point[None, :], w[None, :])
        return float(value[0]), grad[0, free]

    res = minimize(fun, start[free], jac=True, method="L-BFGS-B")
    point = start.copy()
    point[free] = res.x
    return point, float(res.fun)


def numeric_weighted_infimum(
    family: MulticlassFamily,
    weights,
    grid: Optional[ScoreGrid] = None,
    fixed: Optional[Dict[int, float]] = None,
) -> Tuple[np.ndarray, float]:
    """Grid search followed by local refinement; returns the best point and value."""
    grid = grid or ScoreGrid()
    w = np.asarray(weights, dtype=float)
    fixed = dict(fixed or {})
    if not fixed and family.is_shift_invariant:
        fixed = {0: 0.0}
    point, value = grid_minimize(weighted_objective(family, w), w.size, grid, fixed)
    refined, refined_value = refine_minimum(family, w, point, fixed)
    if refined_value < value and np.all(np.isfinite(refined)):
        return refined, refined_value
    return point, value


def surrogate_decision_by_grid(
    family: MulticlassFamily,
    weights,
    grid: Optional[ScoreGrid] = None,
    fixed_first: Optional[float] = None,
    abstain_ties: bool = False,
) -> int:
    """Decision taken by the minimiser of the conditional surrogate risk."""
    fixed = None if fixed_first is None else {0: float(fixed_first)}
    point, _ = numeric_weighted_infimum(family, weights, grid, fixed)
    return _decide(point[None, :], abstain_ties)[0]


def _decide(scores: np.ndarray, abstain_ties: bool) -> np.ndarray:
    if not abstain_ties:
        return np.argmax(scores, axis=1)
    last = scores.shape[1] - 1
    abstain = scores[:, last] >= scores[:, :last].max(axis=1)
    return np.where(abstain, last, np.argmax(scores[:, :last], axis=1))


# -- Gamma forms ---------------------------------------------------------------


class GammaSource(str, Enum):
    COMP_SUM_MU = "comp_sum_mu"
    GENERIC = "generic"


@dataclass(frozen=True)
class GammaForm:
    """Non-decreasing ``Gamma`` with ``Gamma(0) = 0``.

    ``comp_sum_mu`` is the three-branch abstention form in ``(mu, c, n)``.
    ``generic`` is ``outer * beta * (t / inner) ** alpha``, optionally
    floored by ``t`` (``max{t, .}``).
    """

    source: GammaSource
    mu: float = 1.0
    c: float = 0.5
    n: int = 2
    beta: float = 1.0
    alpha: float = 1.0
    outer: float = 1.0
    inner: float = 1.0
    linear_floor: bool = False
    note: str = ""

    def __post_init__(self):
        object.__setattr__(self, "source", GammaSource(self.source))
        if self.source == GammaSource.GENERIC:
            if self.beta < 0 or not 0.0 < self.alpha <= 1.0:
                raise InvalidParameterError("generic Gamma needs beta >= 0 and alpha in (0, 1]")
            if self.outer <= 0 or self.inner <= 0:
                raise InvalidParameterError("Gamma scale constants must be positive")
        elif self.mu < 0 or not 0.0 <= self.c < 1.0 or self.n < 1:
            raise InvalidParameterError("comp_sum_mu Gamma needs mu >= 0, c in [0, 1) and n >= 1")

    def __call__(self, t) -> float:
        return gamma_eval(self, t)

    @classmethod
    def comp_sum_mu(cls, mu: float, c: float, n: int) -> "GammaForm":
        return cls(source=GammaSource.COMP_SUM_MU, mu=mu, c=c, n=n)

    @classmethod
    def generic(cls, beta: float, alpha: float, outer: float = 1.0, inner: float = 1.0,
                linear_floor: bool = False, note: str = "") -> "GammaForm":
        return cls(source=GammaSource.GENERIC, beta=beta, alpha=alpha, outer=outer, inner=inner,
                   linear_floor=linear_floor, note=note)

    @classmethod
    def for_family(cls, family: MulticlassFamily, n_labels: int) -> "GammaForm":
        """``Gamma`` relating a comp-sum family to the 0-1 loss over ``n_labels`` labels."""
        mu = family.effective_mu
        if mu < 1.0:
            return cls.generic(beta=float(np.sqrt(2.0 ** mu * (2.0 - mu))), alpha=0.5, note=family.label)
        if mu < 2.0:
            return cls.generic(beta=float(np.sqrt(2.0 * n_labels ** (mu - 1.0))), alpha=0.5, note=family.label)
        return cls.generic(beta=(mu - 1.0) * n_labels ** (mu - 1.0), alpha=1.0, note=family.label)

    def to_dict(self) -> dict:
        if self.source == GammaSource.COMP_SUM_MU:
            return {"source": self.source.value, "mu": self.mu, "c": self.c, "n": self.n}
        return {
            "source": self.source.value,
            "beta": self.beta,
            "alpha": self.alpha,
            "outer": self.outer,
            "inner": self.inner,
            "linear_floor": self.linear_floor,
            "note": self.note,
        }


def gamma_eval(form: GammaForm, t) -> float:
    """Evaluate ``Gamma(t)`` for ``t >= 0``."""
    t = float(t)
    if t < 0 or not np.isfinite(t):
        raise InvalidInputError(f"Gamma is defined for finite t >= 0, got {t}")
    if form.source == GammaSource.COMP_SUM_MU:
        mu, c, k = form.mu, form.c, form.n + 1
        if mu < 1.0:
            return float(np.sqrt((2.0 - c) * 2.0 ** mu * (2.0 - mu) * t))
        if mu < 2.0:
            return float(np.sqrt(2.0 * (2.0 - c) * k ** (mu - 1.0) * t))
        return float((mu - 1.0) * k ** (mu - 1.0) * t)
    value = form.outer * form.beta * (t / form.inner) ** form.alpha
    return float(max(t, value)) if form.linear_floor else float(value)


def _require_generic(base: GammaForm):
    if base.source != GammaSource.GENERIC:
        raise InvalidParameterError("combinators apply to generic Gamma forms")


def abstention_transform(base: GammaForm, c: float) -> GammaForm:
    """``(2 - c) Gamma(t / (2 - c))``."""
    _require_generic(base)
    scale = 2.0 - c
    return GammaForm.generic(base.beta, base.alpha, base.outer * scale, base.inner * scale,
                             base.linear_floor, f"abstention({base.note})")


def deferral_single_gamma(base: GammaForm, cost_lower, cost_upper) -> GammaForm:
    """Multi-expert score-based form ``(n_e+1-sum c_lo) Gamma(t / (n_e+1-sum c_hi))``.

    Linear ``Gamma`` carries over unchanged.
    """
    _require_generic(base)
    lo = np.asarray(cost_lower, dtype=float)
    hi = np.asarray(cost_upper, dtype=float)
    if base.alpha == 1.0:
        return base
    n_e = lo.size
    outer = n_e + 1.0 - float(lo.sum())
    inner = n_e + 1.0 - float(hi.sum())
    return GammaForm.generic(base.beta, base.alpha, outer, inner, note=f"deferral({base.note})")


def deferral_two_stage_gamma(base: GammaForm, cost_lower, cost_upper) -> GammaForm:
    """Second-stage form ``(1 + sum cbar_hi) Gamma(t / sum cbar_lo)`` with ``cbar = 1 - c``.

    Raises:
        InvalidParameterError: every cost can reach 1, so ``sum cbar_lo`` is 0
            and the bound is vacuous.
    """
    _require_generic(base)
    if base.alpha == 1.0:
        return base
    cbar_hi = 1.0 - np.asarray(cost_lower, dtype=float)
    cbar_lo = 1.0 - np.asarray(cost_upper, dtype=float)
    outer = 1.0 + float(cbar_hi.sum())
    inner = float(cbar_lo.sum())
    if inner <= 0.0:
        raise InvalidParameterError(
            "two-stage deferral bound is vacuous: the cost upper bounds leave no normaliser (sum(1 - c_hi) = 0)"
        )
    return GammaForm.generic(base.beta, base.alpha, outer, inner, note=f"two_stage({base.note})")


def regression_gamma(base: GammaForm, n_e: int, loss_bound: float, cost_upper,
                     single_stage: bool = False) -> GammaForm:
    """``(n_e (lbar + sum c_hi))^{1-alpha} beta t^alpha``, floored by ``t`` for the joint surrogate."""
    _require_generic(base)
    scale = n_e * (loss_bound + float(np.sum(cost_upper)))
    return GammaForm.generic(base.beta * scale ** (1.0 - base.alpha), base.alpha,
                             linear_floor=single_stage, note=f"regression({base.note})")


# -- bound verification --------------------------------------------------------


class BoundSetting(str, Enum):
    ABSTAIN_L_MU = "abstain_L_mu"
    DEFER_SINGLE = "defer_single"
    DEFER_TWO_STAGE_SCORE = "defer_two_stage_score"
    REG_TWO_STAGE = "reg_two_stage"
    REG_SINGLE = "reg_single"


class BoundStatus(str, Enum):
    VERIFIED = "verified"
    VIOLATED = "violated"
    INCONCLUSIVE = "inconclusive"


class InfimumMode(str, Enum):
    CLOSED_FORM = "closed_form"
    GRID = "grid"


@dataclass(frozen=True)
class BoundProblem:
    """Finite instance whose conditional risks reduce to per-input weights.

    At input ``x`` the conditional target risk of a decision ``k`` is
    ``const(x) - w_k(x)`` and the conditional surrogate risk of scores ``h``
    is ``sum_k w_k(x) l(h, k)``.

    When the predictor is learned jointly, each input carries ``A`` candidate
    predictions ``a``: ``candidate_weights[x, a]`` replaces ``weights[x]``,
    the target risk becomes ``target_offsets[x, a] - w_k`` and the surrogate
    risk ``surrogate_scale * sum_k w_k l(h, k) + surrogate_offsets[x, a]``.
    ``weights`` then holds the first candidate.
    """

    setting: BoundSetting
    family: MulticlassFamily
    weights: np.ndarray
    marginal: np.ndarray
    fixed_first: Optional[np.ndarray] = None
    abstain_ties: bool = False
    cost_lower: Optional[np.ndarray] = None
    cost_upper: Optional[np.ndarray] = None
    cost_bounds_source: str = "exact"
    candidate_weights: Optional[np.ndarray] = None
    target_offsets: Optional[np.ndarray] = None
    surrogate_offsets: Optional[np.ndarray] = None
    surrogate_scale: float = 1.0

    @property
    def n_points(self) -> int:
        return self.weights.shape[0]

    @property
    def n_labels(self) -> int:
        return self.weights.shape[1]

    @property
    def n_candidates(self) -> int:
        return 1 if self.candidate_weights is None else self.candidate_weights.shape[1]

    def candidate_tables(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(weights (m, A, K), target offsets (m, A), surrogate offsets (m, A))``."""
        if self.candidate_weights is None:
            zeros = np.zeros((self.n_points, 1))
            return self.weights[:, None, :], zeros, zeros
        return self.candidate_weights, self.target_offsets, self.surrogate_offsets


def _expected_costs(dist: DiscreteDistribution, cost_table: np.ndarray) -> np.ndarray:
    table = np.asarray(cost_table, dtype=float)
    if table.shape[:2] != dist.cond_probs.shape:
        raise InvalidInputError("cost table must be indexed [x, y, expert]")
    return np.einsum("xy,xyj->xj", dist.cond_probs, table)


def _cost_bounds(cost_table: np.ndarray, source: str) -> Tuple[np.ndarray, np.ndarray, str]:
    table = np.asarray(cost_table, dtype=float)
    n_e = table.shape[2]
    if source == "bracketing":
        return np.zeros(n_e), np.ones(n_e), "bracketing"
    return table.min(axis=(0, 1)), table.max(axis=(0, 1)), "exact"


def abstention_problem(dist: DiscreteDistribution, c: float, mu: float) -> BoundProblem:
    if not 0.0 < c < 1.0:
        raise InvalidParameterError(f"abstention cost must lie in (0, 1), got {c}")
    m = dist.n_points
    weights = np.concatenate([dist.cond_probs, np.full((m, 1), 1.0 - c)], axis=1)
    return BoundProblem(
        setting=BoundSetting.ABSTAIN_L_MU,
        family=MulticlassFamily.comp_sum(mu),
        weights=weights,
        marginal=dist.weights,
        abstain_ties=True,
        cost_lower=np.array([c]),
        cost_upper=np.array([c]),
    )


def deferral_problem(dist: DiscreteDistribution, cost_table, family: MulticlassFamily,
                     bound_source: str = "exact") -> BoundProblem:
    expected = _expected_costs(dist, cost_table)
    lo, hi, source = _cost_bounds(cost_table, bound_source)
    weights = np.concatenate([dist.cond_probs, 1.0 - expected], axis=1)
    return BoundProblem(
        setting=BoundSetting.DEFER_SINGLE,
        family=family,
        weights=weights,
        marginal=dist.weights,
        cost_lower=lo,
        cost_upper=hi,
        cost_bounds_source=source,
    )


def two_stage_deferral_problem(dist: DiscreteDistribution, cost_table, family: MulticlassFamily,
                               predictor: np.ndarray, predictor_top: np.ndarray) -> BoundProblem:
    """Second stage with a frozen predictor: ``w = (p(h_p(x)|x), 1 - E[c_j])``."""
    expected = _expected_costs(dist, cost_table)
    lo, hi, source = _cost_bounds(cost_table, "exact")
    m = dist.n_points
    correct = dist.cond_probs[np.arange(m), np.asarray(predictor, dtype=int)]
    weights = np.concatenate([correct[:, None], 1.0 - expected], axis=1)
    return BoundProblem(
        setting=BoundSetting.DEFER_TWO_STAGE_SCORE,
        family=family,
        weights=weights,
        marginal=dist.weights,
        fixed_first=np.asarray(predictor_top, dtype=float),
        cost_lower=lo,
        cost_upper=hi,
        cost_bounds_source=source,
    )


def regression_problem(dist: DiscreteDistribution, loss_table, cost_table,
                       family: MulticlassFamily) -> BoundProblem:
    """Second-stage regression deferral with a frozen predictor.

    ``loss_table[x, y]`` holds ``L(h(x), y)``; weights are
    ``w_0 = E[sum c]`` and ``w_j = E[L + sum c - c_j]``.
    """
    table = np.asarray(cost_table, dtype=float)
    losses = np.asarray(loss_table, dtype=float)
    p = dist.cond_probs
    expected = _expected_costs(dist, table)
    total = expected.sum(axis=1)
    expected_loss = (p * losses).sum(axis=1)
    weights = np.concatenate(
        [total[:, None], expected_loss[:, None] + total[:, None] - expected], axis=1
    )
    lo, hi, source = _cost_bounds(table, "exact")
    return BoundProblem(
        setting=BoundSetting.REG_TWO_STAGE,
        family=family,
        weights=weights,
        marginal=dist.weights,
        cost_lower=lo,
        cost_upper=hi,
        cost_bounds_source=source,
    )


def dominating_scale(family: MulticlassFamily) -> float:
    """``1 / l(1/2)``: the smallest multiple of a comp-sum loss that upper-bounds the 0-1 loss."""
    return float(1.0 / _comp_sum_term(np.array(0.5), family.effective_mu))


def regression_single_problem(dist: DiscreteDistribution, candidate_losses, cost_table,
                              family: MulticlassFamily, scale: Optional[float] = None) -> BoundProblem:
    """Joint regression deferral: the predictor picks one of ``A`` candidates per input.

    ``candidate_losses[x, y, a]`` holds ``L(a, y)``. For candidate ``a`` the
    weights are those of :func:`regression_problem` with ``E[L(a, y)]``, the
    target risk is ``E[L(a)] + E[sum c] - w_k`` and the surrogate adds
    ``-(n_e - 1) E[L(a)]``. The family is scaled by ``scale`` (the dominating
    scale when omitted) so that it upper-bounds the 0-1 loss.
    """
    table = np.asarray(cost_table, dtype=float)
    losses = np.asarray(candidate_losses, dtype=float)
    p = dist.cond_probs
    if losses.ndim != 3 or losses.shape[:2] != p.shape:
        raise InvalidInputError("candidate losses must be indexed [x, y, candidate]")
    if np.any(losses < 0):
        raise InvalidInputError("candidate losses must be non-negative")
    scale = dominating_scale(family) if scale is None else float(scale)
    if scale <= 0:
        raise InvalidParameterError(f"surrogate scale must be positive, got {scale}")
    expected = _expected_costs(dist, table)
    n_e = expected.shape[1]
    total = expected.sum(axis=1)
    expected_loss = np.einsum("xy,xya->xa", p, losses)
    weights = np.concatenate(
        [
            np.broadcast_to(total[:, None, None], expected_loss.shape + (1,)),
            expected_loss[:, :, None] + total[:, None, None] - expected[:, None, :],
        ],
        axis=2,
    )
    lo, hi, source = _cost_bounds(table, "exact")
    return BoundProblem(
        setting=BoundSetting.REG_SINGLE,
        family=family,
        weights=weights[:, 0, :],
        marginal=dist.weights,
        cost_lower=lo,
        cost_upper=hi,
        cost_bounds_source=source,
        candidate_weights=weights,
        target_offsets=expected_loss + total[:, None],
        surrogate_offsets=-(n_e - 1) * expected_loss,
        surrogate_scale=scale,
    )


@dataclass(frozen=True)
class VerifyConfig:
    n_hypotheses: int = 200
    grid: ScoreGrid = field(default_factory=ScoreGrid)
    infimum: InfimumMode = InfimumMode.CLOSED_FORM
    tolerance: float = 1e-9
    seed: int = 0
    n_jobs: int = 1


@dataclass(frozen=True)
class HypothesisRecord:
    index: int
    target_regret: float
    target_gap: float
    surrogate_regret: float
    surrogate_gap: float
    lhs: float
    rhs: float
    margin: float
    margin_upper: float

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "target_regret": self.target_regret,
            "target_gap": self.target_gap,
            "surrogate_regret": self.surrogate_regret,
            "surrogate_gap": self.surrogate_gap,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "margin": self.margin,
        }


@dataclass(frozen=True)
class BoundReport:
    setting: BoundSetting
    family: str
    gamma: GammaForm
    infimum: InfimumMode
    cost_bounds_source: str
    status: BoundStatus
    min_margin: float
    min_margin_upper: float
    violators: List[int]
    records: List[HypothesisRecord]

    @property
    def n_hypotheses(self) -> int:
        return len(self.records)

    def to_dict(self) -> dict:
        return {
            "setting": self.setting.value,
            "family": self.family,
            "gamma": self.gamma.to_dict(),
            "infimum": self.infimum.value,
            "cost_bounds_source": self.cost_bounds_source,
            "n_hypotheses": self.n_hypotheses,
            "status": self.status.value,
            "min_margin": self.min_margin,
            "min_margin_upper": self.min_margin_upper,
            "violators": list(self.violators),
            "records": [r.to_dict() for r in self.records],
        }


@dataclass(frozen=True)
class _Infima:
    class_best: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray


def _infima(problem: BoundProblem, mode: InfimumMode, grid: ScoreGrid) -> _Infima:
    family = problem.family
    m = problem.n_points
    cand, _, s_off = problem.candidate_tables()
    scale = problem.surrogate_scale
    if mode == InfimumMode.CLOSED_FORM:
        if not family.is_comp_sum:
            raise InvalidParameterError(f"no closed-form infimum for {family.label}")
        mu = family.effective_mu
        exact = np.array([
            min(scale * comp_sum_infimum(cand[x, a], mu) + s_off[x, a] for a in range(cand.shape[1]))
            for x in range(m)
        ])
        return _Infima(class_best=exact, estimate=exact, lower=exact)
    best = np.empty(m)
    for x in range(m):
        fixed = {0: float(problem.fixed_first[x])} if problem.fixed_first is not None else None
        if fixed is None and family.is_shift_invariant:
            fixed = {0: 0.0}
        values = []
        for a in range(cand.shape[1]):
            _, value = grid_minimize(weighted_objective(family, cand[x, a]), problem.n_labels, grid, fixed)
            values.append(scale * value + s_off[x, a])
        best[x] = min(values)
    # the weighted part is non-negative
    return _Infima(class_best=best, estimate=best, lower=np.minimum(s_off.min(axis=1), 0.0))


def expected_surrogate(problem: BoundProblem, scores: np.ndarray,
                       choice: Optional[np.ndarray] = None) -> np.ndarray:
    """Conditional surrogate risk at each input for scores ``(m, K)`` and candidate picks."""
    cand, _, s_off = problem.candidate_tables()
    rows = np.arange(problem.n_points)
    choice = np.zeros(problem.n_points, dtype=int) if choice is None else np.asarray(choice, dtype=int)
    surrogate, _ = weighted_family(problem.family, scores, cand[rows, choice])
    return problem.surrogate_scale * surrogate + s_off[rows, choice]


def evaluate_hypothesis(problem: BoundProblem, scores: np.ndarray, gamma: GammaForm,
                        infima: _Infima, index: int = 0,
                        choice: Optional[np.ndarray] = None) -> HypothesisRecord:
    """Both sides of the bound for one per-input score table ``(m, K)``.

    ``choice`` picks the predictor candidate at each input (the first when
    omitted).
    """
    pi = problem.marginal
    cand, t_off, _ = problem.candidate_tables()
    rows = np.arange(problem.n_points)
    choice = np.zeros(problem.n_points, dtype=int) if choice is None else np.asarray(choice, dtype=int)
    w = cand[rows, choice]
    decisions = _decide(scores, problem.abstain_ties)
    risks = t_off[:, :, None] - cand
    chosen = t_off[rows, choice] - w[rows, decisions]
    target_regret = float(pi @ (chosen - risks.min(axis=(1, 2))))
    expected = float(pi @ expected_surrogate(problem, scores, choice))
    best = float(pi @ infima.class_best)
    surrogate_regret = max(expected - best, 0.0)
    surrogate_gap = max(best - float(pi @ infima.estimate), 0.0)
    lhs = target_regret
    rhs = gamma_eval(gamma, surrogate_regret + surrogate_gap)
    rhs_upper = gamma_eval(gamma, max(expected - float(pi @ infima.lower), 0.0))
    return HypothesisRecord(
        index=index,
        target_regret=target_regret,
        target_gap=0.0,
        surrogate_regret=surrogate_regret,
        surrogate_gap=surrogate_gap,
        lhs=lhs,
        rhs=rhs,
        margin=rhs - lhs,
        margin_upper=rhs_upper - lhs,
    )


def _random_hypothesis(problem: BoundProblem, grid: ScoreGrid,
                       seed: np.random.SeedSequence) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    values = grid.values
    scores = values[rng.integers(values.size, size=(problem.n_points, problem.n_labels))]
    if problem.fixed_first is not None:
        scores[:, 0] = problem.fixed_first
    choice = rng.integers(problem.n_candidates, size=problem.n_points)
    return scores, choice


def verify_bound(problem: BoundProblem, gamma: GammaForm, config: Optional[VerifyConfig] = None) -> BoundReport:
    """Check ``target regret + gap <= Gamma(surrogate regret + gap)`` on random hypotheses.

    Hypotheses are per-input score vectors drawn from the grid, plus a
    predictor candidate per input when the problem has several. In
    ``closed_form`` mode the pointwise infima are exact. In ``grid`` mode the
    grid minimum is an upper estimate of each infimum and the most negative
    surrogate offset (0 without candidates) a certified lower
    bound; a negative margin that the lower bound cannot confirm is reported
    as inconclusive.
    """
    config = config or VerifyConfig()
    infima = _infima(problem, InfimumMode(config.infimum), config.grid)
    streams = np.random.SeedSequence(config.seed).spawn(config.n_hypotheses)

    def run(i: int, stream: np.random.SeedSequence) -> HypothesisRecord:
        scores, choice = _random_hypothesis(problem, config.grid, stream)
        return evaluate_hypothesis(problem, scores, gamma, infima, index=i, choice=choice)

    records = Parallel(n_jobs=config.n_jobs, backend="threading")(
        delayed(run)(i, s) for i, s in enumerate(streams)
    )
    margins = np.array([r.margin for r in records]) if records else np.zeros(0)
    uppers = np.array([r.margin_upper for r in records]) if records else np.zeros(0)
    min_margin = float(margins.min()) if margins.size else 0.0
    min_upper = float(uppers.min()) if uppers.size else 0.0
    tol = config.tolerance
    violators = [r.index for r in records if r.margin < -tol]
    if not violators:
        status = BoundStatus.VERIFIED
    elif any(r.margin_upper < -tol for r in records):
        status = BoundStatus.VIOLATED
        violators = [r.index for r in records if r.margin_upper < -tol]
    else:
        status = BoundStatus.INCONCLUSIVE
    logger.info("%s/%s: %s (min margin %.3e)", problem.setting.value, problem.family.label,
                status.value, min_margin)
    return BoundReport(
        setting=problem.setting,
        family=problem.family.label,
        gamma=gamma,
        infimum=InfimumMode(config.infimum),
        cost_bounds_source=problem.cost_bounds_source,
        status=status,
        min_margin=min_margin,
        min_margin_upper=min_upper,
        violators=violators,
        records=list(records),
    )


def endorsed_gamma(problem: BoundProblem, c: Optional[float] = None, loss_bound: float = 1.0) -> GammaForm:
    """The established ``Gamma`` for ``problem``."""
    family = problem.family
    if problem.setting == BoundSetting.ABSTAIN_L_MU:
        return GammaForm.comp_sum_mu(family.mu, float(c if c is not None else problem.cost_lower[0]),
                                     problem.n_labels - 1)
    base = GammaForm.for_family(family, problem.n_labels)
    if problem.setting == BoundSetting.DEFER_SINGLE:
        return deferral_single_gamma(base, problem.cost_lower, problem.cost_upper)
    if problem.setting == BoundSetting.DEFER_TWO_STAGE_SCORE:
        return deferral_two_stage_gamma(base, problem.cost_lower, problem.cost_upper)
    return regression_gamma(base, problem.n_labels - 1, loss_bound, problem.cost_upper,
                            single_stage=problem.setting == BoundSetting.REG_SINGLE)


# -- finite differences --------------------------------------------------------


def fd_check(spec: SurrogateSpec, point: Dict[str, object], step: float = 1e-5) -> float:
    """Largest ``|analytic - central FD| / max(1, |analytic|)`` over trainable coordinates."""
    result = evaluate(spec, point)
    worst = 0.0
    for name in TRAINABLE[spec.tag]:
        base = np.array(point[name], dtype=float)
        analytic = np.asarray(result.grad[name], dtype=float).reshape(base.shape)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += step
            minus[idx] -= step
            up = evaluate(spec, {**point, name: plus}).value
            down = evaluate(spec, {**point, name: minus}).value
            fd = (float(up) - float(down)) / (2.0 * step)
            a = float(analytic[idx])
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst
