from unittest import mock

import numpy as np
import pytest

from deferral.base_losses import BinaryPhi, MulticlassFamily, PhiTag
from deferral.core import CostModel
from deferral.errors import FreezeViolationError, InvalidConfigError
from deferral.surrogates import SurrogateSpec, SurrogateTag
from deferral.synthdata import CounterexampleConfig, gen_realizable_abstention, gen_realizable_deferral
from deferral import training
from deferral.training import (
    FitResult,
    ModelSpec,
    OptimizerKind,
    OptimizerSpec,
    Stage1Loss,
    TraceRow,
    build_model,
    evaluate_system,
)
from deferral.workflow import train_single_stage, train_two_stage


def _diverging_fit(stage: str) -> FitResult:
    rows = [TraceRow(stage, 0, 1.0, 0.5), TraceRow(stage, 1, 2.0, 0.5)]
    return FitResult(trace=rows, initial_loss=1.0, final_loss=2.0)


@pytest.fixture
def realizable():
    return gen_realizable_deferral(CounterexampleConfig(n_samples=400, seed=0))


@pytest.fixture
def misclassification_cost():
    return CostModel.expert_misclassification([1.0], [0.0])


class TestSingleStageWorkflow:
    def test_should_halve_learning_rate_when_fit_does_not_converge(self, blobs):
        """Each retry runs with half the previous learning rate."""
        model = build_model(ModelSpec(input_dim=2, output_dim=2))
        with mock.patch(
            "deferral.workflow.run_single_stage",
            return_value=({"predictor": model}, _diverging_fit("single_stage")),
        ) as fit_mock, mock.patch("deferral.workflow.evaluate_system") as eval_mock:
            pair = train_single_stage(blobs, None, ModelSpec(), None, OptimizerSpec(lr=0.4), max_attempts=3)
        rates = [c.args[4].lr for c in fit_mock.call_args_list]
        assert rates == pytest.approx([0.4, 0.2, 0.1])
        assert eval_mock.call_count == 1
        assert not pair.converged

    def test_should_keep_only_last_attempt_trace_when_retried(self, blobs):
        """A retried stage replaces its earlier trace rows."""
        model = build_model(ModelSpec(input_dim=2, output_dim=2))
        with mock.patch(
            "deferral.workflow.run_single_stage",
            return_value=({"predictor": model}, _diverging_fit("single_stage")),
        ), mock.patch("deferral.workflow.evaluate_system"):
            pair = train_single_stage(blobs, None, ModelSpec(), None, OptimizerSpec(), max_attempts=2)
        assert len(pair.trace) == 2

    def test_should_evaluate_plain_classifier_when_no_surrogate(self, blobs, short_gd):
        """spec=None trains and evaluates a plain classifier."""
        pair = train_single_stage(blobs, None, ModelSpec(), None, short_gd)
        assert pair.deferral is None
        assert pair.stages == ("single_stage",)
        assert pair.frozen_checksum is None


class TestTwoStageWorkflow:
    def test_should_raise_when_surrogate_is_single_stage(self, realizable, misclassification_cost, short_gd):
        """Only second-stage tags enter the two-stage pipeline."""
        spec = SurrogateSpec(SurrogateTag.DEFER_SINGLE, family=MulticlassFamily.logistic())
        with pytest.raises(InvalidConfigError):
            train_two_stage(realizable, Stage1Loss.LOGISTIC, spec, ModelSpec(), misclassification_cost, short_gd)

    def test_should_raise_when_stage_two_touches_predictor(self, realizable, misclassification_cost, short_gd):
        """A changed predictor checksum is a freeze violation."""
        spec = SurrogateSpec(SurrogateTag.DEFER_TWO_STAGE_PR, family=MulticlassFamily.logistic())
        rejector = build_model(ModelSpec(input_dim=2, output_dim=1))

        def tamper(dataset, predictor, *args):
            predictor.params["b"] = predictor.params["b"] + 1.0
            return rejector, _diverging_fit("stage_two")

        with mock.patch("deferral.workflow.run_stage_two", side_effect=tamper):
            with pytest.raises(FreezeViolationError):
                train_two_stage(
                    realizable, Stage1Loss.LOGISTIC, spec, ModelSpec(), misclassification_cost, short_gd
                )

    def test_should_retrain_only_stage_two_when_retrying(self, realizable, misclassification_cost, short_gd):
        """Stage one runs once however many stage-two attempts follow."""
        spec = SurrogateSpec(SurrogateTag.DEFER_TWO_STAGE_PR, family=MulticlassFamily.logistic())
        rejector = build_model(ModelSpec(input_dim=2, output_dim=1))
        with mock.patch("deferral.workflow.run_stage_one", wraps=training.run_stage_one) as one, \
                mock.patch("deferral.workflow.run_stage_two", return_value=(rejector, _diverging_fit("stage_two"))) as two, \
                mock.patch("deferral.workflow.evaluate_system"):
            pair = train_two_stage(
                realizable, Stage1Loss.LOGISTIC, spec, ModelSpec(), misclassification_cost, short_gd, max_attempts=3
            )
        assert one.call_count == 1
        assert two.call_count == 3
        assert pair.stages == ("stage_one", "stage_two")

    @pytest.mark.slow
    def test_should_nearly_realize_zero_loss_when_expert_covers_coin_region(self, misclassification_cost):
        """Linear stages recover the defer-on-coin-region system within 2000 epochs."""
        data = gen_realizable_deferral(CounterexampleConfig(n_samples=4000, seed=4))
        spec = SurrogateSpec(SurrogateTag.DEFER_TWO_STAGE_PR, family=MulticlassFamily.mae())
        optimizer = OptimizerSpec(kind=OptimizerKind.GD_MOMENTUM, lr=0.5, epochs=2000)
        pair = train_two_stage(data, Stage1Loss.LOGISTIC, spec, ModelSpec(), misclassification_cost, optimizer)
        metrics = evaluate_system(pair, data, misclassification_cost)
        assert metrics.target_loss < 0.02
        assert pair.frozen_checksum == pair.predictor.checksum()
        assert np.all(np.array(metrics.deferral_ratios) > 0.2)

    @pytest.mark.slow
    def test_should_nearly_realize_zero_loss_when_abstention_free_on_coin_region(self):
        """Linear stages learn to abstain exactly where abstaining costs nothing."""
        data = gen_realizable_abstention(CounterexampleConfig(n_samples=4000, seed=4))
        spec = SurrogateSpec(SurrogateTag.PR_TWO_STAGE, phi=BinaryPhi(PhiTag.LOGISTIC), c=0.2)
        optimizer = OptimizerSpec(kind=OptimizerKind.GD_MOMENTUM, lr=0.5, epochs=2000)
        pair = train_two_stage(data, Stage1Loss.LOGISTIC, spec, ModelSpec(), None, optimizer)
        metrics = evaluate_system(pair, data)
        assert metrics.target_loss < 0.02
        assert 0.3 < metrics.coverage < 0.7
