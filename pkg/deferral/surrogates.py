"""
Composed surrogate losses for abstention and deferral.

Every surrogate returns a :class:`SurrogateResult` with the value and the
gradient for each named input. Inputs frozen by a two-stage method are
still reported, with an all-zero gradient. Inputs may carry a leading
batch axis; the value is then an array.
"""

import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np

from .base_losses import (
    BinaryPhi,
    FamilyTag,
    MulticlassFamily,
    PhiTag,
    family_kink_distance,
    family_value,
    family_value_and_grad,
    phi_grad,
    phi_kink_distance,
    phi_value,
    weighted_family,
)
from .core import RejectorConvention, predict_labels
from .errors import InvalidInputError, InvalidParameterError, NoGuaranteeWarning

logger = logging.getLogger(__name__)


class SurrogateTag(str, Enum):
    ABSTAIN_L_MU = "abstain_L_mu"
    ABSTAIN_TWO_STAGE = "abstain_two_stage"
    PR_SINGLE = "pr_single"
    PR_TWO_STAGE = "pr_two_stage"
    DEFER_SINGLE = "defer_single"
    DEFER_TWO_STAGE_SCORE = "defer_two_stage_score"
    DEFER_TWO_STAGE_PR = "defer_two_stage_pr"
    REG_SINGLE = "reg_single"
    REG_TWO_STAGE = "reg_two_stage"
    REG_SINGLE_EXPERT = "reg_single_expert"


class PsiTag(str, Enum):
    IDENTITY = "identity"
    SCALED = "scaled"


class Guarantee(str, Enum):
    ENDORSED = "endorsed"
    NO_GUARANTEE = "no_guarantee"


TWO_STAGE_TAGS = (
    SurrogateTag.ABSTAIN_TWO_STAGE,
    SurrogateTag.PR_TWO_STAGE,
    SurrogateTag.DEFER_TWO_STAGE_SCORE,
    SurrogateTag.DEFER_TWO_STAGE_PR,
    SurrogateTag.REG_TWO_STAGE,
)

SINGLE_STAGE_TAGS = (
    SurrogateTag.ABSTAIN_L_MU,
    SurrogateTag.PR_SINGLE,
    SurrogateTag.DEFER_SINGLE,
    SurrogateTag.REG_SINGLE,
    SurrogateTag.REG_SINGLE_EXPERT,
)

# inputs differentiated by the trainer; everything else is data or frozen
TRAINABLE: Dict[SurrogateTag, Tuple[str, ...]] = {
    SurrogateTag.ABSTAIN_L_MU: ("scores",),
    SurrogateTag.ABSTAIN_TWO_STAGE: ("h_extra",),
    SurrogateTag.PR_SINGLE: ("h_scores", "r"),
    SurrogateTag.PR_TWO_STAGE: ("r",),
    SurrogateTag.DEFER_SINGLE: ("scores",),
    SurrogateTag.DEFER_TWO_STAGE_SCORE: ("hd_scores",),
    SurrogateTag.DEFER_TWO_STAGE_PR: ("r_scores",),
    SurrogateTag.REG_SINGLE: ("r_scores", "L_val"),
    SurrogateTag.REG_TWO_STAGE: ("r_scores",),
    SurrogateTag.REG_SINGLE_EXPERT: ("r", "L_val"),
}

FROZEN: Dict[SurrogateTag, Tuple[str, ...]] = {
    SurrogateTag.ABSTAIN_TWO_STAGE: ("h_Y_scores",),
    SurrogateTag.DEFER_TWO_STAGE_SCORE: ("hp_max",),
    SurrogateTag.REG_TWO_STAGE: ("L_val",),
}

_NEEDS_FAMILY = {
    SurrogateTag.PR_SINGLE,
    SurrogateTag.DEFER_SINGLE,
    SurrogateTag.DEFER_TWO_STAGE_SCORE,
    SurrogateTag.DEFER_TWO_STAGE_PR,
    SurrogateTag.REG_SINGLE,
    SurrogateTag.REG_TWO_STAGE,
}

_NEEDS_PHI = {
    SurrogateTag.ABSTAIN_TWO_STAGE,
    SurrogateTag.PR_TWO_STAGE,
    SurrogateTag.REG_SINGLE_EXPERT,
}


@dataclass(frozen=True)
class SurrogateResult:
    value: object
    grad: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class SurrogateSpec:
    """Surrogate tag plus the parameters of its constituent losses."""

    tag: SurrogateTag
    family: Optional[MulticlassFamily] = None
    phi: Optional[BinaryPhi] = None
    psi: PsiTag = PsiTag.IDENTITY
    mu: float = 1.0
    alpha_s: float = 1.0
    beta_s: float = 1.0
    c: Optional[float] = None
    convention: Optional[RejectorConvention] = None

    def __post_init__(self):
        object.__setattr__(self, "tag", SurrogateTag(self.tag))
        object.__setattr__(self, "psi", PsiTag(self.psi))
        tag = self.tag
        if tag == SurrogateTag.ABSTAIN_L_MU:
            if self.mu < 0:
                raise InvalidParameterError(f"mu must be non-negative, got {self.mu}")
            object.__setattr__(self, "family", MulticlassFamily.comp_sum(self.mu))
        if tag == SurrogateTag.PR_SINGLE and self.phi is None:
            object.__setattr__(self, "phi", BinaryPhi(PhiTag.EXP))
        if tag in _NEEDS_FAMILY and self.family is None:
            raise InvalidParameterError(f"{tag.value} needs a multi-class loss family")
        if tag in _NEEDS_PHI and self.phi is None:
            raise InvalidParameterError(f"{tag.value} needs a margin loss Phi")
        if tag in (SurrogateTag.ABSTAIN_L_MU, SurrogateTag.ABSTAIN_TWO_STAGE):
            if self.c is None or not 0.0 < self.c < 1.0:
                raise InvalidParameterError(f"{tag.value} needs an abstention cost in (0, 1)")
        if tag in (SurrogateTag.PR_SINGLE, SurrogateTag.PR_TWO_STAGE):
            if self.c is None or not 0.0 <= self.c < 1.0:
                raise InvalidParameterError(f"{tag.value} needs an abstention cost in [0, 1)")
        if self.alpha_s <= 0 or self.beta_s <= 0:
            raise InvalidParameterError("scale constants alpha_s and beta_s must be positive")
        expected = self.default_convention
        if self.convention is None:
            object.__setattr__(self, "convention", expected)
        elif RejectorConvention(self.convention) != expected:
            raise InvalidParameterError(
                f"{tag.value} routes with {expected.value}, not {RejectorConvention(self.convention).value}"
            )
        else:
            object.__setattr__(self, "convention", RejectorConvention(self.convention))
        if self.guarantee() == Guarantee.NO_GUARANTEE:
            reason = (
                f"pr_single with {self.family.label}, psi={self.psi.value}, "
                f"alpha_s={self.alpha_s:g}, beta_s={self.beta_s:g} has no consistency guarantee"
            )
            logger.warning(reason)
            warnings.warn(NoGuaranteeWarning(reason, tag.value, "unendorsed combination"), stacklevel=3)

    @property
    def default_convention(self) -> RejectorConvention:
        if self.tag == SurrogateTag.DEFER_TWO_STAGE_PR:
            return RejectorConvention.ARGMIN_DEFER
        return RejectorConvention.ARGMAX_DEFER

    @property
    def is_two_stage(self) -> bool:
        return self.tag in TWO_STAGE_TAGS

    def guarantee(self) -> Guarantee:
        """Whether the single-stage predictor-rejector combination is endorsed."""
        if self.tag != SurrogateTag.PR_SINGLE:
            return Guarantee.ENDORSED
        fam = self.family
        if self.alpha_s != self.beta_s:
            return Guarantee.NO_GUARANTEE
        if fam.tag == FamilyTag.COMP_SUM and fam.mu == 2.0 and self.psi == PsiTag.IDENTITY:
            return Guarantee.ENDORSED
        if fam.tag == FamilyTag.MARGIN_RHO and self.psi == PsiTag.IDENTITY:
            return Guarantee.ENDORSED
        if (
            fam.tag == FamilyTag.CONSTRAINED
            and fam.inner.tag == PhiTag.RHO_HINGE
            and self.psi == PsiTag.SCALED
        ):
            return Guarantee.ENDORSED
        return Guarantee.NO_GUARANTEE

    def describe(self) -> str:
        parts = [self.tag.value]
        if self.family is not None:
            parts.append(self.family.label)
        if self.phi is not None:
            parts.append(f"phi={self.phi.tag.value}")
        return ":".join(parts)


def _batch(x) -> Tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    return np.atleast_2d(arr), arr.ndim == 1


def _vector(x, m: int) -> np.ndarray:
    return np.broadcast_to(np.atleast_1d(np.asarray(x, dtype=float)), (m,)).copy()


def _labels(y, m: int) -> np.ndarray:
    return np.broadcast_to(np.atleast_1d(np.asarray(y, dtype=int)), (m,))


def _pack(value: np.ndarray, grads: Dict[str, np.ndarray], single: bool) -> SurrogateResult:
    if single:
        return SurrogateResult(float(value[0]), {k: g[0] for k, g in grads.items()})
    return SurrogateResult(value, grads)


def _check_costs(costs: np.ndarray, n_e: int, name: str = "costs"):
    if costs.shape[1] != n_e:
        raise InvalidInputError(f"expected {n_e} {name}, got {costs.shape[1]}")


def abstain_L_mu(scores, y, c: float, mu: float) -> SurrogateResult:
    """``l_mu(h, y) + (1 - c) l_mu(h, n+1)`` over ``n + 1`` scores."""
    if not 0.0 < c < 1.0:
        raise InvalidParameterError(f"abstention cost must lie in (0, 1), got {c}")
    if mu < 0:
        raise InvalidParameterError(f"mu must be non-negative, got {mu}")
    s, single = _batch(scores)
    m, k = s.shape
    weights = np.zeros_like(s)
    weights[np.arange(m), _labels(y, m)] += 1.0
    weights[:, k - 1] += 1.0 - c
    value, grad = weighted_family(MulticlassFamily.comp_sum(mu), s, weights)
    return _pack(value, {"scores": grad}, single)


def abstain_two_stage(h_Y_scores, h_extra, y, c, phi: BinaryPhi) -> SurrogateResult:
    """``1{h_Y wrong} Phi(h_extra - max h_Y) + c Phi(max h_Y - h_extra)``.

    The first-stage scores ``h_Y_scores`` are frozen.
    """
    h, single = _batch(h_Y_scores)
    m = h.shape[0]
    extra = _vector(h_extra, m)
    wrong = (predict_labels(h) != _labels(y, m)).astype(float)
    d = extra - h.max(axis=1)
    value = wrong * phi_value(phi, d) + c * phi_value(phi, -d)
    g_extra = wrong * phi_grad(phi, d) - c * phi_grad(phi, -d)
    return _pack(value, {"h_extra": g_extra, "h_Y_scores": np.zeros_like(h)}, single)


def pr_single(
    h_scores,
    r,
    y,
    c: float,
    family: MulticlassFamily,
    psi: PsiTag = PsiTag.IDENTITY,
    phi: Optional[BinaryPhi] = None,
    alpha_s: float = 1.0,
    beta_s: float = 1.0,
) -> SurrogateResult:
    """``l(h, y) Phi(-alpha_s r) + Psi(c) Phi(beta_s r)``; ``Psi`` is ``t`` or ``n t``."""
    phi = phi or BinaryPhi(PhiTag.EXP)
    h, single = _batch(h_scores)
    m, n = h.shape
    r = _vector(r, m)
    loss, g_loss = family_value_and_grad(family, h, _labels(y, m))
    psi_c = c if PsiTag(psi) == PsiTag.IDENTITY else n * c
    accept = phi_value(phi, -alpha_s * r)
    reject = phi_value(phi, beta_s * r)
    value = loss * accept + psi_c * reject
    g_h = np.asarray(accept)[:, None] * g_loss
    g_r = -alpha_s * loss * phi_grad(phi, -alpha_s * r) + beta_s * psi_c * phi_grad(phi, beta_s * r)
    return _pack(value, {"h_scores": g_h, "r": g_r}, single)


def pr_two_stage(misclassified, r, c, phi: BinaryPhi) -> SurrogateResult:
    """``1{h wrong} Phi(-r) + c Phi(r)`` for a frozen predictor."""
    single = np.ndim(r) == 0
    r = np.atleast_1d(np.asarray(r, dtype=float))
    wrong = _vector(misclassified, r.shape[0])
    value = wrong * phi_value(phi, -r) + c * phi_value(phi, r)
    g_r = -wrong * phi_grad(phi, -r) + c * phi_grad(phi, r)
    if single:
        return SurrogateResult(float(value[0]), {"r": np.asarray(g_r[0])})
    return SurrogateResult(value, {"r": g_r})


def defer_single(scores, y, costs, family: MulticlassFamily) -> SurrogateResult:
    """``l(h, y) + sum_j (1 - c_j) l(h, n+j)`` over ``n + n_e`` scores."""
    s, single = _batch(scores)
    m, k = s.shape
    c = np.atleast_2d(np.asarray(costs, dtype=float))
    if c.shape[0] == 1 and m > 1:
        c = np.broadcast_to(c, (m, c.shape[1]))
    n_e = c.shape[1]
    n = k - n_e
    if n < 1:
        raise InvalidInputError("score vector shorter than the expert count")
    weights = np.zeros_like(s)
    weights[np.arange(m), _labels(y, m)] = 1.0
    weights[:, n:] += 1.0 - c
    value, grad = weighted_family(family, s, weights)
    return _pack(value, {"scores": grad}, single)


def _two_stage_weights(correct, cost_complements, m: int) -> np.ndarray:
    cbar = np.atleast_2d(np.asarray(cost_complements, dtype=float))
    if cbar.shape[0] == 1 and m > 1:
        cbar = np.broadcast_to(cbar, (m, cbar.shape[1]))
    return np.concatenate([_vector(correct, m)[:, None], cbar], axis=1)


def defer_two_stage_score(hp_max, hd_scores, correct, cost_complements, family: MulticlassFamily) -> SurrogateResult:
    """Second-stage score-based deferral loss on ``(max h_p, h_d)``.

    Label 0 carries the frozen maximal predictor score; labels ``1..n_e``
    are the trainable expert scores.
    """
    hd, single = _batch(hd_scores)
    m, n_e = hd.shape
    top = _vector(hp_max, m)
    weights = _two_stage_weights(correct, cost_complements, m)
    _check_costs(weights[:, 1:], n_e, "cost complements")
    value, grad = weighted_family(family, np.concatenate([top[:, None], hd], axis=1), weights)
    return _pack(value, {"hd_scores": grad[:, 1:], "hp_max": np.zeros(m)}, single)


def defer_two_stage_pr(r_scores, correct, cost_complements, family: MulticlassFamily) -> SurrogateResult:
    """Second-stage predictor-rejector deferral loss on ``(0, -r_1, ..., -r_{n_e})``."""
    r, single = _batch(r_scores)
    m, n_e = r.shape
    weights = _two_stage_weights(correct, cost_complements, m)
    _check_costs(weights[:, 1:], n_e, "cost complements")
    augmented = np.concatenate([np.zeros((m, 1)), -r], axis=1)
    value, grad = weighted_family(family, augmented, weights)
    return _pack(value, {"r_scores": -grad[:, 1:]}, single)


def _regression_terms(L_val, r_scores, costs, family: MulticlassFamily):
    r, single = _batch(r_scores)
    m, k = r.shape
    n_e = k - 1
    c = np.atleast_2d(np.asarray(costs, dtype=float))
    if c.shape[0] == 1 and m > 1:
        c = np.broadcast_to(c, (m, c.shape[1]))
    _check_costs(c, n_e)
    L = _vector(L_val, m)
    total = c.sum(axis=1)
    weights = np.concatenate([total[:, None], L[:, None] + total[:, None] - c], axis=1)
    value, grad = weighted_family(family, r, weights)
    return r, L, n_e, value, grad, single


def reg_single(L_val, r_scores, costs, family: MulticlassFamily) -> SurrogateResult:
    """Joint regression deferral surrogate; the gradient also flows into ``L_val``."""
    r, L, n_e, value, grad, single = _regression_terms(L_val, r_scores, costs, family)
    value = value - (n_e - 1) * L
    expert_terms = sum(np.asarray(family_value(family, r, np.full(r.shape[0], j))) for j in range(1, n_e + 1))
    g_L = expert_terms - (n_e - 1)
    return _pack(value, {"r_scores": grad, "L_val": g_L}, single)


def reg_two_stage(L_val, r_scores, costs, family: MulticlassFamily) -> SurrogateResult:
    """Second-stage regression deferral surrogate with ``L_val`` frozen."""
    r, L, _, value, grad, single = _regression_terms(L_val, r_scores, costs, family)
    return _pack(value, {"r_scores": grad, "L_val": np.zeros_like(L)}, single)


def reg_single_expert(L_val, r, c_val, phi: BinaryPhi) -> SurrogateResult:
    """Single-expert form ``c Phi(r) + L Phi(-r)``."""
    single = np.ndim(r) == 0
    r = np.atleast_1d(np.asarray(r, dtype=float))
    m = r.shape[0]
    L = _vector(L_val, m)
    c = _vector(c_val, m)
    value = c * phi_value(phi, r) + L * phi_value(phi, -r)
    g_r = c * phi_grad(phi, r) - L * phi_grad(phi, -r)
    g_L = np.asarray(phi_value(phi, -r), dtype=float) * np.ones(m)
    if single:
        return SurrogateResult(float(value[0]), {"r": np.asarray(g_r[0]), "L_val": np.asarray(g_L[0])})
    return SurrogateResult(value, {"r": g_r, "L_val": g_L})


def evaluate(spec: SurrogateSpec, inputs: Dict[str, object]) -> SurrogateResult:
    """Dispatch on ``spec.tag`` with named inputs.

    Input names per tag follow the keyword arguments of the surrogate
    functions in this module (for example ``scores`` and ``y`` for
    ``abstain_L_mu``, ``misclassified`` and ``r`` for ``pr_two_stage``). The
    two-stage abstention tags accept an optional per-sample ``c`` in place
    of ``spec.c``.
    """
    tag = spec.tag
    try:
        if tag == SurrogateTag.ABSTAIN_L_MU:
            return abstain_L_mu(inputs["scores"], inputs["y"], spec.c, spec.mu)
        if tag == SurrogateTag.ABSTAIN_TWO_STAGE:
            c = inputs.get("c", spec.c)
            return abstain_two_stage(inputs["h_Y_scores"], inputs["h_extra"], inputs["y"], c, spec.phi)
        if tag == SurrogateTag.PR_SINGLE:
            return pr_single(
                inputs["h_scores"], inputs["r"], inputs["y"], spec.c, spec.family,
                spec.psi, spec.phi, spec.alpha_s, spec.beta_s,
            )
        if tag == SurrogateTag.PR_TWO_STAGE:
            return pr_two_stage(inputs["misclassified"], inputs["r"], inputs.get("c", spec.c), spec.phi)
        if tag == SurrogateTag.DEFER_SINGLE:
            return defer_single(inputs["scores"], inputs["y"], inputs["costs"], spec.family)
        if tag == SurrogateTag.DEFER_TWO_STAGE_SCORE:
            return defer_two_stage_score(
                inputs["hp_max"], inputs["hd_scores"], inputs["correct"], inputs["cbar"], spec.family
            )
        if tag == SurrogateTag.DEFER_TWO_STAGE_PR:
            return defer_two_stage_pr(inputs["r_scores"], inputs["correct"], inputs["cbar"], spec.family)
        if tag == SurrogateTag.REG_SINGLE:
            return reg_single(inputs["L_val"], inputs["r_scores"], inputs["costs"], spec.family)
        if tag == SurrogateTag.REG_TWO_STAGE:
            return reg_two_stage(inputs["L_val"], inputs["r_scores"], inputs["costs"], spec.family)
        if tag == SurrogateTag.REG_SINGLE_EXPERT:
            return reg_single_expert(inputs["L_val"], inputs["r"], inputs["c_val"], spec.phi)
    except KeyError as exc:
        raise InvalidInputError(f"{tag.value} is missing input {exc.args[0]!r}") from exc
    raise InvalidParameterError(f"unknown surrogate tag {tag}")


def kink_distance(spec: SurrogateSpec, inputs: Dict[str, object]) -> float:
    """Smallest distance from a trainable input to a non-differentiable point."""
    tag = spec.tag
    phi = spec.phi
    family = spec.family
    if tag == SurrogateTag.ABSTAIN_L_MU:
        return np.inf
    if tag == SurrogateTag.ABSTAIN_TWO_STAGE:
        d = float(inputs["h_extra"]) - float(np.max(inputs["h_Y_scores"]))
        return phi_kink_distance(phi, np.array([d, -d]))
    if tag == SurrogateTag.PR_SINGLE:
        r = float(inputs["r"])
        return min(
            family_kink_distance(family, inputs["h_scores"], inputs["y"]),
            phi_kink_distance(phi, np.array([-spec.alpha_s * r, spec.beta_s * r])) / max(spec.alpha_s, spec.beta_s),
        )
    if tag in (SurrogateTag.PR_TWO_STAGE, SurrogateTag.REG_SINGLE_EXPERT):
        r = float(inputs["r"])
        return phi_kink_distance(phi, np.array([-r, r]))
    if tag == SurrogateTag.DEFER_SINGLE:
        s = np.asarray(inputs["scores"], dtype=float)
        return min(family_kink_distance(family, s, k) for k in range(s.size))
    if tag == SurrogateTag.DEFER_TWO_STAGE_SCORE:
        s = np.concatenate([[float(inputs["hp_max"])], np.asarray(inputs["hd_scores"], dtype=float)])
    elif tag == SurrogateTag.DEFER_TWO_STAGE_PR:
        s = np.concatenate([[0.0], -np.asarray(inputs["r_scores"], dtype=float)])
    else:
        s = np.asarray(inputs["r_scores"], dtype=float)
    return min(family_kink_distance(family, s, k) for k in range(s.size))


def sample_inputs(spec: SurrogateSpec, rng: np.random.Generator, n: int = 3, n_e: int = 2) -> Dict[str, object]:
    """Random single-point inputs for ``spec`` (scores in ``[-2, 2]``)."""
    tag = spec.tag
    y = int(rng.integers(n))
    costs = rng.uniform(0.0, 1.0, size=n_e)
    if tag == SurrogateTag.ABSTAIN_L_MU:
        return {"scores": rng.uniform(-2, 2, size=n + 1), "y": y}
    if tag == SurrogateTag.ABSTAIN_TWO_STAGE:
        return {"h_Y_scores": rng.uniform(-2, 2, size=n), "h_extra": float(rng.uniform(-2, 2)), "y": y}
    if tag == SurrogateTag.PR_SINGLE:
        return {"h_scores": rng.uniform(-2, 2, size=n), "r": float(rng.uniform(-2, 2)), "y": y}
    if tag == SurrogateTag.PR_TWO_STAGE:
        return {"misclassified": float(rng.integers(2)), "r": float(rng.uniform(-2, 2))}
    if tag == SurrogateTag.DEFER_SINGLE:
        return {"scores": rng.uniform(-2, 2, size=n + n_e), "y": y, "costs": costs}
    if tag == SurrogateTag.DEFER_TWO_STAGE_SCORE:
        return {
            "hp_max": float(rng.uniform(-2, 2)),
            "hd_scores": rng.uniform(-2, 2, size=n_e),
            "correct": float(rng.integers(2)),
            "cbar": 1.0 - costs,
        }
    if tag == SurrogateTag.DEFER_TWO_STAGE_PR:
        return {"r_scores": rng.uniform(-2, 2, size=n_e), "correct": float(rng.integers(2)), "cbar": 1.0 - costs}
    if tag in (SurrogateTag.REG_SINGLE, SurrogateTag.REG_TWO_STAGE):
        return {"L_val": float(rng.uniform(0, 2)), "r_scores": rng.uniform(-2, 2, size=n_e + 1), "costs": costs}
    return {"L_val": float(rng.uniform(0, 2)), "r": float(rng.uniform(-2, 2)), "c_val": float(costs[0])}
