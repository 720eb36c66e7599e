"""
Command-line surface: ``gradcheck``, ``oracle``, ``bounds`` and ``experiment``.

Every command validates its JSON config before computing anything, writes
its files under ``--out`` and returns one of the exit codes below.
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from .config import (
    BoundsConfig,
    ExperimentConfig,
    GradcheckConfig,
    OracleConfig,
    Settings,
    load_config,
)
from .core import CostModel
from .errors import (
    FreezeViolationError,
    InvalidConfigError,
    InvalidInputError,
    InvalidParameterError,
    TrainingDivergedError,
)
from .oracle import (
    BoundReport,
    BoundSetting,
    BoundStatus,
    VerifyConfig,
    abstention_problem,
    bayes_abstention,
    bayes_deferral,
    bayes_pr_abstention,
    deferral_problem,
    endorsed_gamma,
    fd_check,
    min_gap_closed_form,
    numeric_min_gap,
    regression_problem,
    regression_single_problem,
    two_stage_deferral_problem,
    verify_bound,
)
from .reporting import format_table, write_csv, write_json
from .surrogates import SurrogateSpec, kink_distance, sample_inputs
from .synthdata import (
    CounterexampleConfig,
    Dataset,
    LinearFunction,
    best_score_based_triple,
    bayes_counterexample_loss,
    gen_counterexample,
    gen_discrete,
    gen_expert_disjoint,
    gen_realizable_abstention,
    gen_realizable_deferral,
    gen_regression_task,
)
from .training import ABSTENTION_TAGS, Stage1Loss, SystemMetrics, TrainedPair, evaluate_system
from .workflow import train_single_stage, train_two_stage

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VIOLATION = 3
EXIT_INCONCLUSIVE = 4

GAP_TOLERANCE = 1e-6
MAX_KINK_RESAMPLES = 100
# slack on mean accuracy when checking the expert-count trend
MONOTONE_TOLERANCE = 0.005


def configure_logging(verbose: bool, level: Optional[str] = None):
    """Log to stderr: DEBUG with ``--verbose``, else ``level``, else WARNING."""
    name = "DEBUG" if verbose else (level or "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, name, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


# -- gradcheck ---------------------------------------------------------------------


def _gradcheck_rows(spec: SurrogateSpec, config: GradcheckConfig, index: int) -> List[List[Any]]:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, index]))
    rows = []
    for point_id in range(config.n_points):
        for _ in range(MAX_KINK_RESAMPLES):
            point = sample_inputs(spec, rng, n=config.n_classes, n_e=config.n_experts)
            if kink_distance(spec, point) > 10.0 * config.step:
                break
        else:
            raise InvalidConfigError(f"could not sample a differentiable point for {spec.describe()}")
        rows.append([spec.describe(), point_id, fd_check(spec, point, config.step)])
    return rows


def run_gradcheck(config: GradcheckConfig, out_dir: Path, threads: int = 1) -> int:
    """Analytic gradients against central differences at random smooth points."""
    specs = [s.build() for s in config.surrogates]
    logger.info("🔍 Checking gradients of %d surrogates at %d points each", len(specs), config.n_points)
    chunks = Parallel(n_jobs=threads, backend="threading")(
        delayed(_gradcheck_rows)(spec, config, i) for i, spec in enumerate(specs)
    )
    rows = [row for chunk in chunks for row in chunk]
    write_csv(out_dir / "gradcheck.csv", ["surrogate", "point_id", "max_rel_error"], rows)
    failures = [r for r in rows if r[2] > config.threshold]
    for name, point_id, err in failures:
        logger.error("❌ %s point %d: relative error %.3e", name, point_id, err)
    return EXIT_VIOLATION if failures else EXIT_OK


# -- oracle --------------------------------------------------------------------------


def _decision_doc(decision) -> Dict[str, Any]:
    return {"decision": decision.decision, "risk": decision.risk, "defers": decision.defers}


def oracle_report(config: OracleConfig) -> Dict[str, Any]:
    """Closed-form against numeric minimum gaps, plus Bayes decisions on random instances."""
    gaps = []
    for mu in config.mu_grid:
        for c in config.c_grid:
            closed = min_gap_closed_form(mu, c)
            numeric = numeric_min_gap(mu, c)
            gaps.append({"mu": mu, "c": c, "closed_form": closed, "numeric": numeric,
                         "abs_diff": abs(closed - numeric)})
    worst = max((g["abs_diff"] for g in gaps), default=0.0)

    d = config.discrete
    bayes = []
    for seed in config.seeds:
        instance = gen_discrete(d.n_points, d.n_labels, d.n_experts, seed,
                                d.cost_low, d.cost_high, d.deterministic)
        dist = instance.distribution
        expected = np.einsum("xy,xyj->xj", dist.cond_probs, instance.cost_table)
        for x in dist.point_ids():
            p = dist.cond_probs[x]
            bayes.append({
                "seed": seed,
                "point": x,
                "p": p,
                "expected_costs": expected[x],
                "abstention": _decision_doc(bayes_abstention(p, config.c)),
                "pr_abstention": _decision_doc(bayes_pr_abstention(p, config.c)),
                "deferral": _decision_doc(bayes_deferral(p, expected[x])),
            })
    return {
        "c": config.c,
        "min_gap": gaps,
        "max_abs_diff": worst,
        "status": BoundStatus.VERIFIED.value if worst <= GAP_TOLERANCE else BoundStatus.VIOLATED.value,
        "bayes": bayes,
    }


def run_oracle(config: OracleConfig, out_dir: Path) -> int:
    logger.info("🔍 Evaluating minimum gaps on %d x %d grid", len(config.mu_grid), len(config.c_grid))
    doc = oracle_report(config)
    write_json(out_dir / "oracle.json", doc)
    return EXIT_OK if doc["status"] == BoundStatus.VERIFIED.value else EXIT_VIOLATION


# -- bounds --------------------------------------------------------------------------


def _bound_problem(config: BoundsConfig, seed: int):
    d = config.discrete
    instance = gen_discrete(d.n_points, d.n_labels, d.n_experts, seed, d.cost_low, d.cost_high,
                            d.deterministic, loss_bound=config.loss_bound, n_candidates=d.n_candidates)
    family = config.family.build()
    dist = instance.distribution
    if config.setting == BoundSetting.ABSTAIN_L_MU:
        if not family.is_comp_sum:
            raise InvalidConfigError("abstain_L_mu bounds need a comp-sum family")
        return abstention_problem(dist, config.c, family.effective_mu)
    if config.setting == BoundSetting.DEFER_SINGLE:
        return deferral_problem(dist, instance.cost_table, family, config.bound_source)
    if config.setting == BoundSetting.DEFER_TWO_STAGE_SCORE:
        return two_stage_deferral_problem(dist, instance.cost_table, family,
                                          instance.predictor, instance.predictor_top)
    if config.setting == BoundSetting.REG_SINGLE:
        return regression_single_problem(dist, instance.candidate_losses, instance.cost_table, family)
    return regression_problem(dist, instance.loss_table, instance.cost_table, family)


def bound_reports(config: BoundsConfig, threads: int = 1) -> List[Tuple[int, BoundReport]]:
    reports = []
    for i in range(config.n_distributions):
        seed = config.seed + i
        problem = _bound_problem(config, seed)
        if config.gamma.kind == "endorsed":
            gamma = endorsed_gamma(problem, c=config.c, loss_bound=config.loss_bound)
        else:
            gamma = config.gamma.build_generic()
        verify = VerifyConfig(
            n_hypotheses=config.n_hypotheses,
            grid=config.grid.build(),
            infimum=config.infimum,
            tolerance=config.tolerance,
            seed=seed,
            n_jobs=threads,
        )
        reports.append((seed, verify_bound(problem, gamma, verify)))
    return reports


def overall_status(reports: Sequence[BoundReport]) -> BoundStatus:
    statuses = {r.status for r in reports}
    if BoundStatus.VIOLATED in statuses:
        return BoundStatus.VIOLATED
    if BoundStatus.INCONCLUSIVE in statuses:
        return BoundStatus.INCONCLUSIVE
    return BoundStatus.VERIFIED


def run_bounds(config: BoundsConfig, out_dir: Path, threads: int = 1) -> int:
    logger.info("🔍 Verifying %s bounds on %d distributions", config.setting.value, config.n_distributions)
    reports = bound_reports(config, threads)
    status = overall_status([r for _, r in reports])
    doc = {
        "setting": config.setting.value,
        "status": status.value,
        "min_margin": min(r.min_margin for _, r in reports),
        "distributions": [{"seed": seed, **report.to_dict()} for seed, report in reports],
    }
    write_json(out_dir / "bounds.json", doc)
    columns = ["seed", "family", "infimum", "status", "min_margin", "min_margin_upper", "violators"]
    rows = [
        [seed, r.family, r.infimum.value, r.status.value, r.min_margin, r.min_margin_upper, len(r.violators)]
        for seed, r in reports
    ]
    sys.stdout.write(format_table(columns, rows))
    if status == BoundStatus.VIOLATED:
        return EXIT_VIOLATION
    if status == BoundStatus.INCONCLUSIVE:
        return EXIT_INCONCLUSIVE
    return EXIT_OK


# -- experiment ----------------------------------------------------------------------


def build_dataset(config: ExperimentConfig, seed: int) -> Dataset:
    g = config.generator
    if g.task == "expert_disjoint":
        return gen_expert_disjoint(g.n_classes, g.domains, g.off_domain_accuracy, g.feature_noise,
                                   g.n_samples, seed)
    if g.task == "regression":
        return gen_regression_task(g.target, g.fidelity, g.noise, g.n_samples, g.n_features, seed,
                                   loss=config.cost.loss)
    geometry = CounterexampleConfig(
        f_abs=LinearFunction(tuple(g.w_abs), g.b_abs),
        f_pred=LinearFunction(tuple(g.w_pred), g.b_pred),
        c=g.c,
        n_samples=g.n_samples,
        seed=seed,
    )
    if g.task == "counterexample":
        return gen_counterexample(geometry)
    if g.task == "realizable_abstention":
        return gen_realizable_abstention(geometry)
    return gen_realizable_deferral(geometry)


@dataclass
class TrialResult:
    seed: int
    n_experts: int
    label: str
    pair: TrainedPair
    metrics: SystemMetrics


def _trial(config: ExperimentConfig, dataset: Dataset, seed: int, n_experts: int) -> TrialResult:
    spec = config.surrogate.build() if config.surrogate is not None else None
    abstaining = spec is not None and spec.tag in ABSTENTION_TAGS
    data = dataset if abstaining else dataset.with_experts(n_experts)
    if spec is not None and not abstaining and n_experts == 0:
        spec = None
    cost_model: Optional[CostModel] = None
    if spec is not None and not abstaining:
        cost_model = config.cost.build(n_experts, loss_bound=dataset.metadata.get("loss_bound"))
    model_spec = config.model.build()
    optimizer = config.optimizer.build()
    if config.pipeline == "two_stage" and spec is not None:
        stage1 = config.stage1 or (Stage1Loss.SQUARED if data.is_regression else Stage1Loss.LOGISTIC)
        stage1_optimizer = config.stage1_optimizer.build() if config.stage1_optimizer else None
        pair = train_two_stage(data, stage1, spec, model_spec, cost_model, optimizer,
                               stage1_optimizer, seed, config.max_attempts)
    else:
        pair = train_single_stage(data, spec, model_spec, cost_model, optimizer, seed, config.max_attempts)
    metrics = evaluate_system(pair, data, cost_model)
    label = spec.describe() if spec is not None else "plain"
    logger.info("✅ seed %d, %d experts, %s: target loss %.4f", seed, n_experts, label, metrics.target_loss)
    return TrialResult(seed, n_experts, label, pair, metrics)


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    kept = [v for v in values if v is not None]
    return float(np.mean(kept)) if kept else None


def counterexample_summary(config: ExperimentConfig, datasets: Dict[int, Dataset],
                           results: Sequence[TrialResult]) -> Dict[str, Any]:
    """Bayes loss, trained pair loss and the best score-based triple per seed."""
    c = config.generator.c
    per_seed = []
    for seed, dataset in datasets.items():
        search = best_score_based_triple(dataset, c, seed=seed)
        trained = [r.metrics.target_loss for r in results if r.seed == seed]
        bayes = bayes_counterexample_loss(dataset, c)
        per_seed.append({
            "seed": seed,
            "bayes_loss": bayes,
            "trained_pair_loss": trained[0] if trained else None,
            "pair_minus_bayes": trained[0] - bayes if trained else None,
            "best_triple_loss": search.loss,
            "best_triple": {
                "f_1": {"w": list(search.f_1.w), "b": search.f_1.b},
                "f_2": {"w": list(search.f_2.w), "b": search.f_2.b},
            },
            "delta": search.delta,
        })
    return {
        "c": c,
        "mean_bayes_loss": _mean([s["bayes_loss"] for s in per_seed]),
        "mean_trained_pair_loss": _mean([s["trained_pair_loss"] for s in per_seed]),
        "mean_pair_minus_bayes": _mean([s["pair_minus_bayes"] for s in per_seed]),
        "mean_delta": _mean([s["delta"] for s in per_seed]),
        "seeds": per_seed,
    }


def accuracy_trend(by_count: Sequence[Dict[str, Any]]) -> Optional[bool]:
    """Whether mean accuracy is non-decreasing in the expert count, up to ``MONOTONE_TOLERANCE``.

    ``None`` when fewer than two counts report an accuracy.
    """
    ordered = sorted((e for e in by_count if e["mean_accuracy"] is not None), key=lambda e: e["n_experts"])
    if len(ordered) < 2:
        return None
    return all(
        after["mean_accuracy"] >= before["mean_accuracy"] - MONOTONE_TOLERANCE
        for before, after in zip(ordered, ordered[1:])
    )


EXPERIMENT_COLUMNS = [
    "seed", "n_experts", "surrogate", "pipeline", "target_loss", "accuracy", "mse",
    "coverage", "acceptance_error", "deferral_ratios", "converged",
]


def run_experiment(config: ExperimentConfig, out_dir: Path, threads: int = 1) -> int:
    spec_tag = config.surrogate.tag if config.surrogate is not None else None
    abstaining = spec_tag in ABSTENTION_TAGS
    datasets = {seed: build_dataset(config, seed) for seed in config.seeds}
    if config.write_datasets:
        for seed, dataset in datasets.items():
            dataset.to_csv(out_dir / "data" / f"seed{seed}.csv")
    counts = [0] if abstaining or not any(d.n_experts for d in datasets.values()) else config.expert_counts
    jobs = [(seed, k) for seed in config.seeds for k in counts]
    logger.info("🚀 Running %d trials (%s, %s)", len(jobs), config.generator.task, config.pipeline)
    results: List[TrialResult] = Parallel(n_jobs=threads, backend="threading")(
        delayed(_trial)(config, datasets[seed], seed, k) for seed, k in jobs
    )

    rows = []
    for r in results:
        m = r.metrics
        rows.append([
            r.seed, r.n_experts, r.label, config.pipeline, m.target_loss, m.accuracy, m.mse,
            m.coverage, m.acceptance_error, ";".join(repr(v) for v in m.deferral_ratios), r.pair.converged,
        ])
        if config.write_traces:
            write_csv(
                out_dir / "traces" / f"seed{r.seed}_experts{r.n_experts}.csv",
                ["stage", "epoch", "surrogate_loss", "target_loss"],
                [[t.stage, t.epoch, t.surrogate_loss, t.target_loss] for t in r.pair.trace],
            )
    write_csv(out_dir / "experiment.csv", EXPERIMENT_COLUMNS, rows)

    by_count = [
        {
            "n_experts": k,
            "runs": sum(1 for r in results if r.n_experts == k),
            "mean_target_loss": _mean([r.metrics.target_loss for r in results if r.n_experts == k]),
            "mean_accuracy": _mean([r.metrics.accuracy for r in results if r.n_experts == k]),
            "mean_mse": _mean([r.metrics.mse for r in results if r.n_experts == k]),
        }
        for k in counts
    ]
    summary: Dict[str, Any] = {
        "task": config.generator.task,
        "pipeline": config.pipeline,
        "surrogate": results[0].label if results else None,
        "by_expert_count": by_count,
        "monotone": accuracy_trend(by_count),
        "non_converged": [[r.seed, r.n_experts] for r in results if not r.pair.converged],
    }
    if config.generator.task == "counterexample":
        summary["counterexample"] = counterexample_summary(config, datasets, results)
    write_json(out_dir / "summary.json", summary)
    return EXIT_OK


# -- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deferral",
        description="Surrogate losses for learning with abstention and multi-expert deferral",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gradcheck": "Compare analytic surrogate gradients with finite differences",
        "oracle": "Bayes decisions and closed-form minimum gaps",
        "bounds": "Check consistency bounds on random discrete distributions",
        "experiment": "Train and evaluate deferral systems on synthetic tasks",
    }
    for name, text in helps.items():
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("--config", help="JSON config file (defaults when omitted)")
        cmd.add_argument("--out", help="Output directory (default: $DEFERRAL_OUT_DIR or ./out)")
        cmd.add_argument("--threads", type=int, help="Worker threads (default: $DEFERRAL_THREADS or 1)")
        cmd.add_argument("--verbose", action="store_true", help="Debug logging on stderr")
    return parser


def _error(exc: Exception) -> None:
    payload = {"error": str(exc), "type": type(exc).__name__}
    if isinstance(exc, TrainingDivergedError):
        payload.update(epoch=exc.epoch, last_finite_loss=exc.last_finite_loss)
    sys.stderr.write(json.dumps(payload) + "\n")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command and return its exit code."""
    args = build_parser().parse_args(argv)
    try:
        settings = Settings.from_env()
        configure_logging(args.verbose, settings.log_level)
        config = load_config(args.command, args.config)
        out_dir = Path(args.out or settings.out_dir)
        threads = args.threads or settings.threads
        if threads < 1:
            raise InvalidConfigError("--threads must be at least 1")
        if args.command == "gradcheck":
            return run_gradcheck(config, out_dir, threads)
        if args.command == "oracle":
            return run_oracle(config, out_dir)
        if args.command == "bounds":
            return run_bounds(config, out_dir, threads)
        return run_experiment(config, out_dir, threads)
    except (InvalidConfigError, InvalidParameterError, InvalidInputError) as exc:
        _error(exc)
        return EXIT_CONFIG
    except (TrainingDivergedError, FreezeViolationError) as exc:
        _error(exc)
        return EXIT_VIOLATION
