"""
Atomic loss families: margin-based binary losses ``Phi`` and the multi-class
families every composed surrogate is built from.

Values and gradients are vectorised over a leading batch axis. A 1-D score
vector with an integer target returns a float and a 1-D gradient.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import InvalidInputError, InvalidParameterError

LOG2 = float(np.log(2.0))


class PhiTag(str, Enum):
    EXP = "exp"
    LOGISTIC = "logistic"
    QUADRATIC = "quadratic"
    HINGE = "hinge"
    SIGMOID = "sigmoid"
    RHO_MARGIN = "rho_margin"
    RHO_HINGE = "rho_hinge"


@dataclass(frozen=True)
class BinaryPhi:
    """Non-increasing margin loss ``u -> Phi(u)``."""

    tag: PhiTag
    k: float = 1.0
    rho: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "tag", PhiTag(self.tag))
        if self.k <= 0:
            raise InvalidParameterError(f"sigmoid steepness k must be positive, got {self.k}")
        if self.rho <= 0:
            raise InvalidParameterError(f"rho must be positive, got {self.rho}")

    @property
    def kinks(self) -> Tuple[float, ...]:
        if self.tag in (PhiTag.HINGE, PhiTag.QUADRATIC):
            return (1.0,)
        if self.tag == PhiTag.RHO_MARGIN:
            return (0.0, self.rho)
        if self.tag == PhiTag.RHO_HINGE:
            return (self.rho,)
        return ()

    @property
    def zero_one_scale(self) -> float:
        """Factor making ``scale * Phi(u) >= 1{u <= 0}`` hold."""
        return 1.0 / LOG2 if self.tag == PhiTag.LOGISTIC else 1.0


def phi_value(phi: BinaryPhi, u):
    """Evaluate ``Phi`` elementwise."""
    u = np.asarray(u, dtype=float)
    tag = phi.tag
    if tag == PhiTag.EXP:
        out = np.exp(-u)
    elif tag == PhiTag.LOGISTIC:
        out = np.logaddexp(0.0, -u)
    elif tag == PhiTag.QUADRATIC:
        out = np.maximum(1.0 - u, 0.0) ** 2
    elif tag == PhiTag.HINGE:
        out = np.maximum(1.0 - u, 0.0)
    elif tag == PhiTag.SIGMOID:
        out = 1.0 - np.tanh(phi.k * u)
    elif tag == PhiTag.RHO_MARGIN:
        out = np.clip(1.0 - u / phi.rho, 0.0, 1.0)
    elif tag == PhiTag.RHO_HINGE:
        out = np.maximum(1.0 - u / phi.rho, 0.0)
    else:
        raise InvalidParameterError(f"unknown Phi tag {tag}")
    return float(out) if out.ndim == 0 else out


def phi_grad(phi: BinaryPhi, u):
    """Derivative of ``Phi``; zero at kinks."""
    u = np.asarray(u, dtype=float)
    tag = phi.tag
    if tag == PhiTag.EXP:
        out = -np.exp(-u)
    elif tag == PhiTag.LOGISTIC:
        out = -np.exp(-np.logaddexp(0.0, u))
    elif tag == PhiTag.QUADRATIC:
        out = -2.0 * np.maximum(1.0 - u, 0.0)
    elif tag == PhiTag.HINGE:
        out = np.where(u < 1.0, -1.0, 0.0)
    elif tag == PhiTag.SIGMOID:
        t = np.tanh(phi.k * u)
        out = -phi.k * (1.0 - t * t)
    elif tag == PhiTag.RHO_MARGIN:
        out = np.where((u > 0.0) & (u < phi.rho), -1.0 / phi.rho, 0.0)
    elif tag == PhiTag.RHO_HINGE:
        out = np.where(u < phi.rho, -1.0 / phi.rho, 0.0)
    else:
        raise InvalidParameterError(f"unknown Phi tag {tag}")
    return float(out) if out.ndim == 0 else out


def _kink_gap(phi: BinaryPhi, u: np.ndarray) -> float:
    if not phi.kinks or np.size(u) == 0:
        return np.inf
    u = np.asarray(u, dtype=float).ravel()
    return float(min(np.abs(u - k).min() for k in phi.kinks))


class FamilyTag(str, Enum):
    COMP_SUM = "comp_sum"
    GCE = "gce"
    SUM = "sum"
    CONSTRAINED = "constrained"
    MARGIN_RHO = "margin_rho"


_SUM_INNER = {PhiTag.QUADRATIC, PhiTag.EXP, PhiTag.RHO_MARGIN, PhiTag.HINGE, PhiTag.LOGISTIC, PhiTag.SIGMOID}
_CONSTRAINED_INNER = {PhiTag.HINGE, PhiTag.QUADRATIC, PhiTag.EXP, PhiTag.RHO_MARGIN, PhiTag.RHO_HINGE}


@dataclass(frozen=True)
class MulticlassFamily:
    """A multi-class loss ``l(h, x, y)`` over ``K`` labels."""

    tag: FamilyTag
    mu: float = 1.0
    alpha: float = 0.7
    inner: Optional[BinaryPhi] = None
    rho: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "tag", FamilyTag(self.tag))
        if self.tag == FamilyTag.COMP_SUM and self.mu < 0:
            raise InvalidParameterError(f"mu must be non-negative, got {self.mu}")
        if self.tag == FamilyTag.GCE and not 0.0 < self.alpha < 1.0:
            raise InvalidParameterError(f"GCE alpha must lie in (0, 1), got {self.alpha}")
        if self.tag == FamilyTag.SUM:
            if self.inner is None or self.inner.tag not in _SUM_INNER:
                raise InvalidParameterError("sum family needs a margin-based inner Phi")
        if self.tag == FamilyTag.CONSTRAINED:
            if self.inner is None or self.inner.tag not in _CONSTRAINED_INNER:
                raise InvalidParameterError("constrained family needs a hinge, sq, exp or rho inner Phi")
        if self.tag == FamilyTag.MARGIN_RHO and self.rho <= 0:
            raise InvalidParameterError(f"rho must be positive, got {self.rho}")

    @classmethod
    def comp_sum(cls, mu: float) -> "MulticlassFamily":
        return cls(tag=FamilyTag.COMP_SUM, mu=mu)

    @classmethod
    def logistic(cls) -> "MulticlassFamily":
        return cls.comp_sum(1.0)

    @classmethod
    def exponential(cls) -> "MulticlassFamily":
        return cls.comp_sum(0.0)

    @classmethod
    def mae(cls) -> "MulticlassFamily":
        return cls.comp_sum(2.0)

    @classmethod
    def gce(cls, alpha: float = 0.7) -> "MulticlassFamily":
        return cls(tag=FamilyTag.GCE, alpha=alpha)

    @classmethod
    def sum_loss(cls, inner: BinaryPhi) -> "MulticlassFamily":
        return cls(tag=FamilyTag.SUM, inner=inner)

    @classmethod
    def constrained(cls, inner: BinaryPhi) -> "MulticlassFamily":
        return cls(tag=FamilyTag.CONSTRAINED, inner=inner)

    @classmethod
    def margin_rho(cls, rho: float = 1.0) -> "MulticlassFamily":
        return cls(tag=FamilyTag.MARGIN_RHO, rho=rho)

    @property
    def is_comp_sum(self) -> bool:
        """True for the softmax families (comp-sum and GCE)."""
        return self.tag in (FamilyTag.COMP_SUM, FamilyTag.GCE)

    @property
    def effective_mu(self) -> float:
        """Comp-sum exponent with the same conditional risk (GCE is ``1 + alpha``)."""
        if self.tag == FamilyTag.GCE:
            return 1.0 + self.alpha
        if self.tag == FamilyTag.COMP_SUM:
            return self.mu
        raise InvalidParameterError(f"{self.tag.value} is not a comp-sum family")

    @property
    def is_shift_invariant(self) -> bool:
        return self.tag != FamilyTag.CONSTRAINED

    @property
    def dominates_zero_one(self) -> bool:
        """True when ``l(h, y) >= 1{argmax h != y}`` for every score vector."""
        if self.tag == FamilyTag.COMP_SUM:
            return self.mu == 0.0
        if self.tag in (FamilyTag.SUM, FamilyTag.CONSTRAINED):
            return self.inner.tag in (
                PhiTag.HINGE,
                PhiTag.QUADRATIC,
                PhiTag.EXP,
                PhiTag.RHO_MARGIN,
                PhiTag.RHO_HINGE,
            )
        return self.tag == FamilyTag.MARGIN_RHO

    @property
    def label(self) -> str:
        if self.tag == FamilyTag.COMP_SUM:
            return {0.0: "exp", 1.0: "log", 2.0: "mae"}.get(self.mu, f"comp_sum(mu={self.mu:g})")
        if self.tag == FamilyTag.GCE:
            return f"gce(alpha={self.alpha:g})"
        if self.tag == FamilyTag.MARGIN_RHO:
            return f"margin_rho(rho={self.rho:g})"
        return f"{self.tag.value}({self.inner.tag.value})"


def _prepare(scores, target):
    s = np.asarray(scores, dtype=float)
    single = s.ndim == 1
    s = np.atleast_2d(s)
    t = np.broadcast_to(np.atleast_1d(np.asarray(target, dtype=int)), (s.shape[0],))
    if s.shape[1] < 2:
        raise InvalidInputError("a multi-class loss needs at least two labels")
    if np.any(t < 0) or np.any(t >= s.shape[1]):
        raise InvalidInputError(f"target outside 0..{s.shape[1] - 1}")
    return s, t, single


def _onehot(t: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((t.shape[0], k))
    out[np.arange(t.shape[0]), t] = 1.0
    return out


def _log_ratio(s: np.ndarray, t: np.ndarray) -> np.ndarray:
    """``log sum_y' exp(h_y' - h_t) = -log softmax_t``, always >= 0."""
    return -np.take_along_axis(log_softmax(s, axis=1), t[:, None], axis=1)[:, 0]


def _comp_sum_value(s, t, mu):
    log_s = _log_ratio(s, t)
    if mu == 1.0:
        return log_s
    return np.expm1((1.0 - mu) * log_s) / (1.0 - mu)


def _comp_sum_grad(s, t, mu):
    log_s = _log_ratio(s, t)
    scale = np.exp((1.0 - mu) * log_s)
    return scale[:, None] * (softmax(s, axis=1) - _onehot(t, s.shape[1]))


def _wrong_mask(s, t):
    mask = np.ones_like(s)
    mask[np.arange(s.shape[0]), t] = 0.0
    return mask


def _finish(value, grad, single):
    if single:
        return (float(value[0]), grad[0]) if grad is not None else float(value[0])
    return (value, grad) if grad is not None else value


def ell_mu_value(scores, target, mu: float):
    """Comp-sum loss ``l_mu``; the logistic loss at ``mu = 1``, MAE at ``mu = 2``."""
    if mu < 0:
        raise InvalidParameterError(f"mu must be non-negative, got {mu}")
    s, t, single = _prepare(scores, target)
    return _finish(_comp_sum_value(s, t, float(mu)), None, single)


def ell_mu_grad(scores, target, mu: float):
    if mu < 0:
        raise InvalidParameterError(f"mu must be non-negative, got {mu}")
    s, t, single = _prepare(scores, target)
    g = _comp_sum_grad(s, t, float(mu))
    return g[0] if single else g


def _family_eval(family: MulticlassFamily, s, t, want_grad: bool):
    tag = family.tag
    k = s.shape[1]
    rows = np.arange(s.shape[0])
    if tag == FamilyTag.COMP_SUM:
        value = _comp_sum_value(s, t, family.mu)
        grad = _comp_sum_grad(s, t, family.mu) if want_grad else None
    elif tag == FamilyTag.GCE:
        a = family.alpha
        log_py = -_log_ratio(s, t)
        value = -np.expm1(a * log_py) / a
        grad = None
        if want_grad:
            grad = np.exp(a * log_py)[:, None] * (softmax(s, axis=1) - _onehot(t, k))
    elif tag == FamilyTag.SUM:
        phi = family.inner
        mask = _wrong_mask(s, t)
        delta = s[rows, t][:, None] - s
        value = (phi_value(phi, delta) * mask).sum(axis=1)
        grad = None
        if want_grad:
            d = phi_grad(phi, delta) * mask
            grad = -d
            grad[rows, t] = d.sum(axis=1)
    elif tag == FamilyTag.CONSTRAINED:
        phi = family.inner
        mask = _wrong_mask(s, t)
        centred = s - s.mean(axis=1, keepdims=True)
        value = (phi_value(phi, -centred) * mask).sum(axis=1)
        grad = None
        if want_grad:
            g = -phi_grad(phi, -centred) * mask
            grad = g - g.mean(axis=1, keepdims=True)
    elif tag == FamilyTag.MARGIN_RHO:
        phi = BinaryPhi(PhiTag.RHO_MARGIN, rho=family.rho)
        other = s.copy()
        other[rows, t] = -np.inf
        j = np.argmax(other, axis=1)
        margin = s[rows, t] - s[rows, j]
        value = np.asarray(phi_value(phi, margin), dtype=float)
        grad = None
        if want_grad:
            d = np.asarray(phi_grad(phi, margin), dtype=float)
            grad = np.zeros_like(s)
            grad[rows, t] = d
            grad[rows, j] = -d
    else:
        raise InvalidParameterError(f"unknown family tag {tag}")
    return value, grad


def family_value(family: MulticlassFamily, scores, target):
    """Loss value ``l(h, x, target)`` for each row of ``scores``."""
    s, t, single = _prepare(scores, target)
    value, _ = _family_eval(family, s, t, want_grad=False)
    return _finish(value, None, single)


def family_grad(family: MulticlassFamily, scores, target):
    """Analytic gradient of :func:`family_value` with respect to the raw scores."""
    s, t, single = _prepare(scores, target)
    _, grad = _family_eval(family, s, t, want_grad=True)
    return grad[0] if single else grad


def family_value_and_grad(family: MulticlassFamily, scores, target):
    s, t, single = _prepare(scores, target)
    value, grad = _family_eval(family, s, t, want_grad=True)
    return _finish(value, grad, single)


def weighted_family(family: MulticlassFamily, scores, weights):
    """``sum_k w_k l(h, x, k)`` and its gradient, row by row.

    Args:
        family: Loss family over ``K`` labels.
        scores: Array of shape ``(m, K)``.
        weights: Array of shape ``(m, K)``.

    Returns:
        Tuple of the values ``(m,)`` and gradients ``(m, K)``.
    """
    s = np.atleast_2d(np.asarray(scores, dtype=float))
    w = np.atleast_2d(np.asarray(weights, dtype=float))
    if w.shape != s.shape:
        raise InvalidInputError(f"weights shape {w.shape} does not match scores {s.shape}")
    value = np.zeros(s.shape[0])
    grad = np.zeros_like(s)
    for k in range(s.shape[1]):
        wk = w[:, k]
        if not np.any(wk):
            continue
        v, g = _family_eval(family, s, np.full(s.shape[0], k), want_grad=True)
        value += wk * v
        grad += wk[:, None] * g
    return value, grad


def family_kink_distance(family: MulticlassFamily, scores, target) -> float:
    """Distance from ``scores`` to the nearest non-differentiable point."""
    s, t, _ = _prepare(scores, target)
    rows = np.arange(s.shape[0])
    if family.is_comp_sum:
        return np.inf
    mask = _wrong_mask(s, t).astype(bool)
    if family.tag == FamilyTag.SUM:
        delta = s[rows, t][:, None] - s
        return _kink_gap(family.inner, delta[mask])
    if family.tag == FamilyTag.CONSTRAINED:
        centred = s - s.mean(axis=1, keepdims=True)
        return _kink_gap(family.inner, -centred[mask])
    other = s.copy()
    other[rows, t] = -np.inf
    ordered = np.sort(other, axis=1)
    tie_gap = np.inf
    if s.shape[1] > 2:
        tie_gap = float((ordered[:, -1] - ordered[:, -2]).min())
    margin = s[rows, t] - ordered[:, -1]
    return min(tie_gap, _kink_gap(BinaryPhi(PhiTag.RHO_MARGIN, rho=family.rho), margin))


def phi_kink_distance(phi: BinaryPhi, u) -> float:
    return _kink_gap(phi, np.asarray(u, dtype=float))
