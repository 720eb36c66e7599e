import csv
import json

import pytest

from deferral.cli import EXIT_CONFIG, EXIT_INCONCLUSIVE, EXIT_OK, EXIT_VIOLATION, accuracy_trend, main


def _write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


def _run(tmp_path, command, doc=None, out="out", extra=()):
    argv = [command, "--out", str(tmp_path / out), *extra]
    if doc is not None:
        argv += ["--config", _write_config(tmp_path, doc, f"{command}_{out}.json")]
    return main(argv)


SMALL_EXPERIMENT = {
    "generator": {"task": "expert_disjoint", "n_samples": 120},
    "optimizer": {"lr": 0.5, "epochs": 20},
    "seeds": [0],
    "expert_counts": [1, 2],
}


class TestConfigErrors:
    def test_should_exit_with_config_code_when_cost_grid_out_of_range(self, tmp_path):
        """c_grid values outside (0, 1) are rejected before any work."""
        assert _run(tmp_path, "oracle", {"c_grid": [1.5]}) == EXIT_CONFIG
        assert not (tmp_path / "out" / "oracle.json").exists()

    def test_should_exit_with_config_code_when_key_unknown(self, tmp_path, capsys):
        """Unknown keys are errors; stderr carries a JSON error object."""
        assert _run(tmp_path, "bounds", {"setting": "abstain_L_mu", "n_hypothesis": 10}) == EXIT_CONFIG
        payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert payload["type"] == "InvalidConfigError"

    def test_should_exit_with_config_code_when_file_missing(self, tmp_path):
        """A missing config path is a configuration error."""
        assert main(["gradcheck", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_should_exit_with_config_code_when_json_malformed(self, tmp_path):
        """Malformed JSON is a configuration error."""
        path = tmp_path / "broken.json"
        path.write_text("{not json", encoding="utf-8")
        assert main(["oracle", "--config", str(path), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_should_exit_with_config_code_when_threads_invalid(self, tmp_path):
        """--threads must be positive."""
        assert _run(tmp_path, "oracle", extra=("--threads", "-1")) == EXIT_CONFIG

    def test_should_exit_with_config_code_when_expert_counts_exceed_domains(self, tmp_path):
        """Asking for more experts than the generator built is invalid."""
        doc = {**SMALL_EXPERIMENT, "expert_counts": [4]}
        assert _run(tmp_path, "experiment", doc) == EXIT_CONFIG


class TestGradcheck:
    def test_should_pass_when_every_surrogate_is_differentiated_correctly(self, tmp_path):
        """Default surrogates on a few random points."""
        assert _run(tmp_path, "gradcheck", {"n_points": 5}) == EXIT_OK
        with open(tmp_path / "out" / "gradcheck.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 10 * 5
        assert max(float(r["max_rel_error"]) for r in rows) <= 1e-5


class TestOracle:
    def test_should_verify_minimum_gaps_when_defaults(self, tmp_path):
        """Closed-form and numeric gaps agree on the default grid."""
        assert _run(tmp_path, "oracle") == EXIT_OK
        doc = json.loads((tmp_path / "out" / "oracle.json").read_text())
        assert doc["status"] == "verified"
        assert doc["max_abs_diff"] <= 1e-6
        assert len(doc["min_gap"]) == 18
        assert len(doc["bayes"]) == 3


class TestBounds:
    def test_should_verify_and_print_table_when_endorsed_gamma(self, tmp_path, capsys):
        """The endorsed abstention bound holds and a table is printed."""
        doc = {"setting": "abstain_L_mu", "n_distributions": 2, "n_hypotheses": 50}
        assert _run(tmp_path, "bounds", doc) == EXIT_OK
        out = capsys.readouterr().out
        assert out.splitlines()[0].split()[:2] == ["seed", "family"]
        report = json.loads((tmp_path / "out" / "bounds.json").read_text())
        assert report["status"] == "verified"
        assert len(report["distributions"]) == 2

    def test_should_exit_with_violation_code_when_gamma_too_small(self, tmp_path):
        """A shrunken Gamma is falsified."""
        doc = {
            "setting": "abstain_L_mu",
            "n_distributions": 1,
            "n_hypotheses": 100,
            "gamma": {"kind": "generic", "beta": 0.01, "alpha": 1.0},
        }
        assert _run(tmp_path, "bounds", doc) == EXIT_VIOLATION
        report = json.loads((tmp_path / "out" / "bounds.json").read_text())
        assert report["status"] == "violated"
        assert report["distributions"][0]["violators"]

    def test_should_never_report_violation_when_grid_infimum(self, tmp_path):
        """Grid infima give verified or inconclusive, never violated."""
        doc = {
            "setting": "defer_single",
            "n_distributions": 1,
            "n_hypotheses": 30,
            "infimum": "grid",
            "grid": {"low": -3.0, "high": 3.0, "resolution": 0.5},
        }
        assert _run(tmp_path, "bounds", doc) in (EXIT_OK, EXIT_INCONCLUSIVE)

    def test_should_verify_joint_regression_bound_when_candidates_drawn(self, tmp_path):
        """reg_single problems pick among drawn candidate predictions."""
        doc = {"setting": "reg_single", "n_distributions": 2, "n_hypotheses": 100,
               "discrete": {"n_candidates": 4}}
        assert _run(tmp_path, "bounds", doc) == EXIT_OK
        report = json.loads((tmp_path / "out" / "bounds.json").read_text())
        assert report["status"] == "verified"

    def test_should_write_identical_report_when_threads_differ(self, tmp_path):
        """The bound report does not depend on the worker count."""
        doc = {"setting": "defer_single", "n_distributions": 1, "n_hypotheses": 40}
        _run(tmp_path, "bounds", doc, out="one", extra=("--threads", "1"))
        _run(tmp_path, "bounds", doc, out="four", extra=("--threads", "4"))
        one = (tmp_path / "one" / "bounds.json").read_bytes()
        four = (tmp_path / "four" / "bounds.json").read_bytes()
        assert one == four


class TestAccuracyTrend:
    @pytest.mark.parametrize(
        "accuracies, expected",
        [([0.5, 0.7, 0.9], True), ([0.5, 0.498, 0.9], True), ([0.5, 0.4, 0.9], False), ([0.8], None)],
    )
    def test_should_flag_trend_within_tolerance(self, accuracies, expected):
        """Small dips are tolerated, larger ones are not."""
        by_count = [{"n_experts": k + 1, "mean_accuracy": a} for k, a in enumerate(accuracies)]
        assert accuracy_trend(by_count) is expected

    def test_should_skip_counts_without_accuracy(self):
        """Regression runs carry no accuracy."""
        by_count = [{"n_experts": 1, "mean_accuracy": None}, {"n_experts": 2, "mean_accuracy": 0.6}]
        assert accuracy_trend(by_count) is None


class TestExperiment:
    def test_should_write_rows_traces_and_summary(self, tmp_path):
        """One row per (seed, expert count) plus traces and a summary."""
        assert _run(tmp_path, "experiment", SMALL_EXPERIMENT) == EXIT_OK
        out = tmp_path / "out"
        with open(out / "experiment.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["n_experts"]) for r in rows] == [1, 2]
        assert (out / "traces" / "seed0_experts2.csv").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert [b["n_experts"] for b in summary["by_expert_count"]] == [1, 2]

    def test_should_reproduce_files_byte_for_byte_when_rerun(self, tmp_path):
        """Same config and seeds give identical outputs."""
        _run(tmp_path, "experiment", SMALL_EXPERIMENT, out="first")
        _run(tmp_path, "experiment", SMALL_EXPERIMENT, out="second", extra=("--threads", "2"))
        for name in ("experiment.csv", "summary.json", "traces/seed0_experts1.csv"):
            assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes()

    def test_should_exit_with_violation_code_when_training_diverges(self, tmp_path, capsys):
        """Divergence is reported with the epoch and last finite loss."""
        doc = {
            "generator": {"task": "counterexample", "n_samples": 200},
            "surrogate": {"tag": "abstain_L_mu", "mu": 0.0, "c": 0.2},
            "optimizer": {"lr": 1e6, "epochs": 10},
            "seeds": [0],
        }
        assert _run(tmp_path, "experiment", doc) == EXIT_VIOLATION
        payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert payload["type"] == "TrainingDivergedError"
        assert payload["epoch"] >= 1

    def test_should_train_two_stage_regression_when_configured(self, tmp_path):
        """Second-stage regression deferral reports an MSE."""
        doc = {
            "generator": {"task": "regression", "n_samples": 100},
            "pipeline": "two_stage",
            "surrogate": {"tag": "reg_two_stage", "family": {"tag": "comp_sum", "mu": 1.0}},
            "cost": {"kind": "regression_expert", "alpha": [0.0, 0.0, 0.0]},
            "optimizer": {"lr": 0.1, "epochs": 20},
            "seeds": [0],
            "expert_counts": [2],
        }
        assert _run(tmp_path, "experiment", doc) == EXIT_OK
        with open(tmp_path / "out" / "experiment.csv", newline="") as fh:
            row = next(csv.DictReader(fh))
        assert float(row["mse"]) >= 0.0
        assert row["pipeline"] == "two_stage"

    @pytest.mark.slow
    def test_should_summarize_counterexample_gap(self, tmp_path):
        """The trained pair reaches the Bayes loss while every score-based triple stays above it."""
        doc = {
            "generator": {"task": "counterexample", "n_samples": 100000},
            "surrogate": {"tag": "pr_two_stage", "phi": {"tag": "sigmoid"}, "c": 0.2},
            "pipeline": "two_stage",
            "optimizer": {"lr": 1.0, "epochs": 2000},
            "seeds": [0],
            "write_traces": False,
        }
        assert _run(tmp_path, "experiment", doc) == EXIT_OK
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        seed = summary["counterexample"]["seeds"][0]
        assert seed["delta"] == pytest.approx(seed["best_triple_loss"] - seed["bayes_loss"])
        assert seed["pair_minus_bayes"] == pytest.approx(seed["trained_pair_loss"] - seed["bayes_loss"])
        assert abs(seed["pair_minus_bayes"]) <= 0.01
        assert seed["delta"] > 0.01

    @pytest.mark.slow
    def test_should_gain_accuracy_with_each_expert_when_domains_disjoint(self, tmp_path):
        """Mean accuracy never drops as experts are added and equals 1 - loss at zero base cost."""
        doc = {
            "generator": {"task": "expert_disjoint"},
            "cost": {"beta": [0.0, 0.0, 0.0]},
            "seeds": [0, 1, 2],
            "expert_counts": [1, 2, 3],
            "write_traces": False,
        }
        assert _run(tmp_path, "experiment", doc) == EXIT_OK
        out = tmp_path / "out"
        summary = json.loads((out / "summary.json").read_text())
        assert summary["monotone"] is True
        means = [b["mean_accuracy"] for b in summary["by_expert_count"]]
        assert means == sorted(means)
        with open(out / "experiment.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                assert float(row["accuracy"]) == pytest.approx(1.0 - float(row["target_loss"]), abs=1e-12)

    def test_should_use_environment_out_dir_when_flag_absent(self, tmp_path, monkeypatch):
        """DEFERRAL_OUT_DIR is the default output directory."""
        monkeypatch.setenv("DEFERRAL_OUT_DIR", str(tmp_path / "env_out"))
        assert main(["oracle"]) == EXIT_OK
        assert (tmp_path / "env_out" / "oracle.json").exists()

    def test_should_export_generated_data_when_requested(self, tmp_path):
        """write_datasets stores one CSV per seed."""
        doc = {**SMALL_EXPERIMENT, "write_datasets": True, "write_traces": False}
        assert _run(tmp_path, "experiment", doc) == EXIT_OK
        assert (tmp_path / "out" / "data" / "seed0.csv").exists()
        assert not (tmp_path / "out" / "traces").exists()
