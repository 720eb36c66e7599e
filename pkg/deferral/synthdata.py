"""
Seeded synthetic generators for the abstention and deferral experiments.

Every generator is a pure function of its arguments: all randomness is drawn
from ``numpy.random.default_rng(seed)``.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import minimize

from .core import DiscreteDistribution, RegressionLoss, regression_loss
from .errors import InvalidConfigError, InvalidParameterError
from .reporting import write_csv

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    """Features, labels and the fixed expert outputs of a synthetic task."""

    X: np.ndarray
    y: np.ndarray
    expert_outputs: Optional[np.ndarray] = None
    n_classes: Optional[int] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def n_experts(self) -> int:
        return 0 if self.expert_outputs is None else self.expert_outputs.shape[1]

    @property
    def is_regression(self) -> bool:
        return self.n_classes is None

    def with_experts(self, k: int) -> "Dataset":
        """Keep the first ``k`` experts."""
        if not 0 <= k <= self.n_experts:
            raise InvalidConfigError(f"dataset has {self.n_experts} experts, asked for {k}")
        outputs = None if k == 0 else self.expert_outputs[:, :k]
        return replace(self, expert_outputs=outputs)

    def to_csv(self, path: Union[str, Path]):
        header = [f"x_{i}" for i in range(self.n_features)] + ["y"]
        header += [f"expert_{j}" for j in range(self.n_experts)]
        cast = float if self.is_regression else int
        rows = []
        for i in range(self.n_samples):
            row = [float(v) for v in self.X[i]] + [cast(self.y[i])]
            if self.n_experts:
                row += [cast(v) for v in self.expert_outputs[i]]
            rows.append(row)
        write_csv(path, header, rows)


@dataclass(frozen=True)
class LinearFunction:
    """``x -> w . x + b``."""

    w: Tuple[float, ...]
    b: float = 0.0

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) @ np.asarray(self.w, dtype=float) + self.b

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.w))


# -- counterexample geometry --------------------------------------------------

REGION_ABSTAIN = 0
REGION_POSITIVE = 1
REGION_NEGATIVE = 2


@dataclass(frozen=True)
class CounterexampleConfig:
    """Two unit-norm linear functions on the unit ball.

    Points with ``f_abs(x) <= 0`` get a fair coin label; elsewhere the sign of
    ``f_pred`` decides between class 0 and class 1.
    """

    f_abs: LinearFunction = LinearFunction((1.0, 0.0))
    f_pred: LinearFunction = LinearFunction((0.0, 1.0))
    c: float = 0.2
    n_samples: int = 100_000
    seed: int = 0

    def __post_init__(self):
        for name in ("f_abs", "f_pred"):
            f = getattr(self, name)
            if abs(f.norm - 1.0) > 1e-9:
                raise InvalidConfigError(f"{name} must have a unit-norm weight vector, got norm {f.norm:g}")
        if len(self.f_abs.w) != len(self.f_pred.w):
            raise InvalidConfigError("f_abs and f_pred must share the input dimension")
        if not 0.0 <= self.c < 0.5:
            raise InvalidConfigError(f"counterexample cost must lie in [0, 0.5), got {self.c}")
        if self.n_samples < 1:
            raise InvalidConfigError("n_samples must be positive")

    @property
    def dim(self) -> int:
        return len(self.f_abs.w)


def uniform_ball(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    direction = rng.standard_normal((n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = rng.uniform(0.0, 1.0, n) ** (1.0 / dim)
    return direction * radius[:, None]


def gen_counterexample(config: CounterexampleConfig) -> Dataset:
    rng = np.random.default_rng(config.seed)
    X = uniform_ball(rng, config.n_samples, config.dim)
    coin = rng.integers(0, 2, config.n_samples)
    abstain = config.f_abs(X) <= 0
    positive = config.f_pred(X) > 0
    region = np.where(abstain, REGION_ABSTAIN, np.where(positive, REGION_POSITIVE, REGION_NEGATIVE))
    y = np.where(abstain, coin, np.where(positive, 0, 1))
    return Dataset(
        X=X,
        y=y.astype(int),
        n_classes=2,
        metadata={"task": "counterexample", "region": region, "c": config.c},
    )


def bayes_counterexample_loss(dataset: Dataset, c: Optional[float] = None) -> float:
    """Empirical loss of the Bayes rule: abstain on the coin region, else predict by ``f_pred``."""
    c = dataset.metadata["c"] if c is None else c
    region = dataset.metadata["region"]
    return float(np.mean(np.where(region == REGION_ABSTAIN, c, 0.0)))


def score_based_triple_loss(X: np.ndarray, y: np.ndarray, c: float,
                            f_1: LinearFunction, f_2: LinearFunction) -> float:
    """Abstention loss of ``h = (f_1, -f_1, f_2)``; abstention wins ties."""
    s1 = f_1(X)
    s3 = f_2(X)
    abstain = s3 >= np.abs(s1)
    predicted = np.where(s1 >= 0, 0, 1)
    return float(np.mean(np.where(abstain, c, (predicted != y).astype(float))))


@dataclass(frozen=True)
class TripleSearchResult:
    loss: float
    f_1: LinearFunction
    f_2: LinearFunction
    bayes_loss: float

    @property
    def delta(self) -> float:
        return self.loss - self.bayes_loss


def _directions(dim: int, count: int, rng: np.random.Generator) -> np.ndarray:
    if dim == 2:
        angles = np.linspace(0.0, 2.0 * np.pi, count, endpoint=False)
        return np.stack([np.cos(angles), np.sin(angles)], axis=1)
    d = rng.standard_normal((count, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else np.eye(v.size)[0]


def best_score_based_triple(
    dataset: Dataset,
    c: Optional[float] = None,
    n_directions: int = 16,
    biases: Sequence[float] = tuple(np.linspace(-1.0, 1.0, 9)),
    n_starts: int = 5,
    subsample: int = 5000,
    seed: int = 0,
) -> TripleSearchResult:
    """Multi-start search over unit-norm score-based linear triples.

    A coarse direction/bias grid is scored on a subsample; the best starts are
    then polished with Nelder-Mead on the full sample.
    """
    c = dataset.metadata["c"] if c is None else c
    rng = np.random.default_rng(seed)
    X, y = dataset.X, dataset.y
    idx = rng.choice(X.shape[0], size=min(subsample, X.shape[0]), replace=False)
    Xs, ys = X[idx], y[idx]
    dirs = _directions(X.shape[1], n_directions, rng)
    biases = np.asarray(biases, dtype=float)
    candidates = [(d, b) for d in dirs for b in biases]
    values = np.stack([Xs @ d + b for d, b in candidates])
    predicted = np.where(values >= 0, 0, 1)
    wrong = (predicted != ys[None, :]).astype(float)
    scored: List[Tuple[float, int, int]] = []
    for i in range(len(candidates)):
        abstain = values >= np.abs(values[i])[None, :]
        losses = np.where(abstain, c, wrong[i][None, :]).mean(axis=1)
        j = int(np.argmin(losses))
        scored.append((float(losses[j]), i, j))
    scored.sort()
    dim = X.shape[1]

    def unpack(z):
        return (
            LinearFunction(tuple(_unit(z[:dim])), float(z[dim])),
            LinearFunction(tuple(_unit(z[dim + 1:2 * dim + 1])), float(z[2 * dim + 1])),
        )

    def objective(z):
        f_1, f_2 = unpack(z)
        return score_based_triple_loss(X, y, c, f_1, f_2)

    best = None
    for _, i, j in scored[:n_starts]:
        z0 = np.concatenate([candidates[i][0], [candidates[i][1]], candidates[j][0], [candidates[j][1]]])
        res = minimize(objective, z0, method="Nelder-Mead",
                       options={"xatol": 1e-4, "fatol": 1e-6, "maxiter": 400})
        z = res.x if res.fun <= objective(z0) else z0
        value = objective(z)
        if best is None or value < best[0]:
            best = (value, z)
    f_1, f_2 = unpack(best[1])
    result = TripleSearchResult(best[0], f_1, f_2, bayes_counterexample_loss(dataset, c))
    logger.info("best score-based triple: loss %.4f, gap %.4f", result.loss, result.delta)
    return result


def gen_realizable_deferral(config: CounterexampleConfig) -> Dataset:
    """Counterexample geometry with one expert that is right exactly on the coin region.

    With the misclassification cost ``1{g(x) != y}`` the Bayes system (defer on
    the coin region, predict by ``f_pred`` elsewhere) has zero loss and is
    linear in both stages.
    """
    base = gen_counterexample(config)
    on_region = base.metadata["region"] == REGION_ABSTAIN
    expert = np.where(on_region, base.y, 1 - base.y)
    return replace(
        base,
        expert_outputs=expert[:, None].astype(int),
        metadata={**base.metadata, "task": "realizable"},
    )


def gen_realizable_abstention(config: CounterexampleConfig) -> Dataset:
    """Counterexample geometry where abstaining is free on the coin region.

    ``metadata["abstention_costs"]`` is 0 on the coin region and ``c``
    elsewhere, so abstaining on the coin region and predicting by ``f_pred``
    elsewhere has zero loss.
    """
    base = gen_counterexample(config)
    costs = np.where(base.metadata["region"] == REGION_ABSTAIN, 0.0, config.c)
    return replace(
        base,
        metadata={**base.metadata, "task": "realizable_abstention", "abstention_costs": costs},
    )


# -- expert-disjoint deferral ----------------------------------------------------


def gen_expert_disjoint(
    n_classes: int,
    domains: Sequence[Sequence[int]],
    off_domain_accuracy: float,
    feature_noise: float = 0.3,
    n_samples: int = 600,
    seed: int = 0,
    separation: float = 3.0,
) -> Dataset:
    """Classes grouped by the first expert domain that contains them.

    Features carry the group (a scaled one-hot centroid plus Gaussian noise)
    and nothing about the class within the group. Expert ``j`` returns the
    true label on its domain; off-domain it is correct with probability
    ``off_domain_accuracy`` and otherwise returns a uniformly drawn wrong
    label.
    """
    if n_classes < 2:
        raise InvalidConfigError("need at least two classes")
    if not domains:
        raise InvalidConfigError("need at least one expert domain")
    for d in domains:
        if len(d) == 0:
            raise InvalidConfigError("expert domains must be non-empty")
        if min(d) < 0 or max(d) >= n_classes:
            raise InvalidConfigError(f"domain {list(d)} outside 0..{n_classes - 1}")
    if not 0.0 <= off_domain_accuracy <= 1.0:
        raise InvalidConfigError("off-domain accuracy must lie in [0, 1]")
    if feature_noise < 0:
        raise InvalidConfigError("feature noise must be non-negative")

    group = np.full(n_classes, len(domains), dtype=int)
    for g, d in reversed(list(enumerate(domains))):
        group[list(d)] = g
    n_groups = int(group.max()) + 1
    dim = max(n_groups, 2)
    rng = np.random.default_rng(seed)
    y = rng.integers(0, n_classes, n_samples)
    X = separation * np.eye(dim)[group[y]] + feature_noise * rng.standard_normal((n_samples, dim))

    experts = np.empty((n_samples, len(domains)), dtype=int)
    for j, d in enumerate(domains):
        in_domain = np.isin(y, list(d))
        lucky = rng.uniform(size=n_samples) < off_domain_accuracy
        shift = rng.integers(1, n_classes, n_samples)
        wrong = (y + shift) % n_classes
        experts[:, j] = np.where(in_domain | lucky, y, wrong)
    return Dataset(
        X=X,
        y=y.astype(int),
        expert_outputs=experts,
        n_classes=n_classes,
        metadata={"task": "expert_disjoint", "group": group[y], "domains": [list(d) for d in domains]},
    )


# -- regression --------------------------------------------------------------------

_TARGETS = {
    "sine": lambda X: np.sin(np.pi * X[:, 0]),
    "linear": lambda X: X.sum(axis=1),
    "constant": lambda X: np.ones(X.shape[0]),
}


def gen_regression_task(
    target: str,
    fidelity: Sequence[float],
    noise: float,
    n_samples: int = 400,
    n_features: int = 1,
    seed: int = 0,
    loss: RegressionLoss = RegressionLoss.SQUARED,
) -> Dataset:
    """Noisy target with analytic experts ``f(x) + fidelity_j * cos(3 pi x_0)``.

    All experts share the bounded perturbation, so their errors are ordered
    by ``fidelity``.
    """
    if target not in _TARGETS:
        raise InvalidConfigError(f"unknown target {target!r}; expected one of {sorted(_TARGETS)}")
    if noise < 0:
        raise InvalidConfigError("noise must be non-negative")
    if any(f < 0 for f in fidelity):
        raise InvalidConfigError("fidelity levels must be non-negative")
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.0, 1.0, (n_samples, n_features))
    clean = _TARGETS[target](X)
    y = clean + noise * rng.standard_normal(n_samples)
    perturbation = np.cos(3.0 * np.pi * X[:, 0])
    experts = clean[:, None] + np.asarray(fidelity, dtype=float)[None, :] * perturbation[:, None]
    losses = regression_loss(loss, experts, y[:, None]) if len(fidelity) else np.zeros((n_samples, 0))
    return Dataset(
        X=X,
        y=y,
        expert_outputs=experts if len(fidelity) else None,
        n_classes=None,
        metadata={
            "task": "regression",
            "target": target,
            "fidelity": list(fidelity),
            "loss_bound": float(losses.max()) if losses.size else 1.0,
        },
    )


# -- discrete instances -------------------------------------------------------------


@dataclass(frozen=True)
class DiscreteInstance:
    """Finite distribution plus the tables the bound checks consume.

    ``cost_table[x, y, j]`` is the cost of expert ``j``; ``loss_table[x, y]``
    is the loss of a fixed regression predictor and
    ``candidate_losses[x, y, a]`` the loss of the ``a``-th prediction a
    learned predictor may make at ``x``; ``predictor`` and ``predictor_top``
    describe a fixed first-stage classifier.
    """

    distribution: DiscreteDistribution
    cost_table: np.ndarray
    loss_table: np.ndarray
    predictor: np.ndarray
    predictor_top: np.ndarray
    candidate_losses: np.ndarray


def gen_discrete(
    m: int,
    n: int,
    n_e: int,
    seed: int,
    cost_low: float = 0.0,
    cost_high: float = 1.0,
    deterministic: bool = False,
    loss_bound: float = 1.0,
    n_candidates: int = 3,
) -> DiscreteInstance:
    if min(m, n, n_e, n_candidates) < 1:
        raise InvalidParameterError("all sizes must be at least 1")
    if not 0.0 <= cost_low <= cost_high <= 1.0:
        raise InvalidParameterError("cost bounds must satisfy 0 <= low <= high <= 1")
    rng = np.random.default_rng(seed)
    if deterministic:
        probs = np.eye(n)[rng.integers(0, n, m)]
    else:
        probs = rng.dirichlet(np.ones(n), size=m)
        probs /= probs.sum(axis=1, keepdims=True)
    weights = rng.dirichlet(np.ones(m)) if m > 1 else np.ones(1)
    weights /= weights.sum()
    dist = DiscreteDistribution(cond_probs=probs, weights=weights, features=np.arange(m)[:, None])
    cost_table = rng.uniform(cost_low, cost_high, (m, n, n_e))
    loss_table = rng.uniform(0.0, loss_bound, (m, n))
    predictor = rng.integers(0, n, m)
    predictor_top = rng.choice(np.linspace(-2.0, 2.0, 17), m)
    # drawn last so the tables above stay put for a given seed
    candidates = rng.uniform(0.0, loss_bound, (m, n, n_candidates))
    return DiscreteInstance(
        distribution=dist,
        cost_table=cost_table,
        loss_table=loss_table,
        predictor=predictor,
        predictor_top=predictor_top,
        candidate_losses=candidates,
    )
