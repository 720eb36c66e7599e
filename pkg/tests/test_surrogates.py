import warnings

import numpy as np
import pytest

from deferral.base_losses import BinaryPhi, FamilyTag, MulticlassFamily, PhiTag
from deferral.errors import InvalidInputError, InvalidParameterError, NoGuaranteeWarning
from deferral.oracle import fd_check
from deferral.surrogates import (
    FROZEN,
    TRAINABLE,
    Guarantee,
    PsiTag,
    SurrogateSpec,
    SurrogateTag,
    abstain_L_mu,
    abstain_two_stage,
    defer_single,
    defer_two_stage_pr,
    defer_two_stage_score,
    evaluate,
    kink_distance,
    pr_single,
    pr_two_stage,
    reg_single,
    reg_single_expert,
    reg_two_stage,
    sample_inputs,
)

LOG3 = float(np.log(3.0))


def _spec(tag: SurrogateTag) -> SurrogateSpec:
    if tag == SurrogateTag.ABSTAIN_L_MU:
        return SurrogateSpec(tag, mu=1.0, c=0.3)
    if tag in (SurrogateTag.ABSTAIN_TWO_STAGE, SurrogateTag.PR_TWO_STAGE):
        return SurrogateSpec(tag, phi=BinaryPhi(PhiTag.LOGISTIC), c=0.3)
    if tag == SurrogateTag.REG_SINGLE_EXPERT:
        return SurrogateSpec(tag, phi=BinaryPhi(PhiTag.EXP))
    if tag == SurrogateTag.PR_SINGLE:
        return SurrogateSpec(tag, family=MulticlassFamily.mae(), c=0.3)
    return SurrogateSpec(tag, family=MulticlassFamily.logistic())


class TestAbstainLMu:
    def test_should_scale_symmetric_value_when_scores_equal(self):
        """(1 + (1 - c)) log 3 at zero scores."""
        assert abstain_L_mu(np.zeros(3), 0, 0.5, 1.0).value == pytest.approx(1.647918, abs=1e-6)

    def test_should_use_mae_value_when_mu_two(self):
        """1.5 * 2/3 at zero scores."""
        assert abstain_L_mu(np.zeros(3), 0, 0.5, 2.0).value == pytest.approx(1.0)

    def test_should_approach_plain_loss_when_cost_near_one(self):
        """The abstain term vanishes as c -> 1."""
        s = np.array([0.5, -0.2, 0.1])
        value = abstain_L_mu(s, 1, 1.0 - 1e-12, 1.0).value
        plain = -np.log(np.exp(s[1]) / np.exp(s).sum())
        assert value == pytest.approx(plain, abs=1e-9)

    @pytest.mark.parametrize("c", [0.0, 1.0])
    def test_should_raise_when_cost_outside_open_interval(self, c):
        """c must lie in (0, 1)."""
        with pytest.raises(InvalidParameterError):
            abstain_L_mu(np.zeros(3), 0, c, 1.0)


class TestTwoStageAbstention:
    def test_should_pay_both_terms_when_wrong_and_tied(self, exp_phi):
        """Phi(0) = 1 on both sides: 1 + 0.3."""
        result = abstain_two_stage(np.array([0.0, 1.0]), 1.0, 0, 0.3, exp_phi)
        assert result.value == pytest.approx(1.3)

    def test_should_pay_abstain_term_only_when_correct(self, exp_phi):
        """Correct first stage: 0.3 e^-1 at h_extra - max h_Y = -1."""
        result = abstain_two_stage(np.array([1.0, 0.0]), 0.0, 0, 0.3, exp_phi)
        assert result.value == pytest.approx(0.3 * np.exp(-1.0))

    def test_should_grow_accept_term_when_wrong_and_below(self, exp_phi):
        """Wrong first stage with h_extra one below the top: e + 0.3 e^-1."""
        result = abstain_two_stage(np.array([0.0, 1.0]), 0.0, 0, 0.3, exp_phi)
        assert result.value == pytest.approx(np.e + 0.3 * np.exp(-1.0))

    def test_should_report_zero_gradient_for_frozen_scores(self, exp_phi):
        """First-stage scores are frozen."""
        result = abstain_two_stage(np.array([0.0, 1.0]), 0.3, 0, 0.3, exp_phi)
        assert np.all(result.grad["h_Y_scores"] == 0.0)


class TestPredictorRejector:
    def test_should_add_both_terms_when_rejector_zero(self):
        """MAE 0.5 at equal scores plus c, both at Phi(0) = 1."""
        result = pr_single(np.zeros(2), 0.0, 0, 0.5, MulticlassFamily.mae())
        assert result.value == pytest.approx(1.0)

    def test_should_keep_accept_term_only_when_cost_zero(self):
        """c = 0 leaves l(h, y) e^{-5} at r = -5."""
        result = pr_single(np.zeros(2), -5.0, 0, 0.0, MulticlassFamily.mae())
        assert result.value == pytest.approx(0.5 * np.exp(-5.0))

    def test_should_scale_cost_when_psi_scaled(self):
        """Psi(c) = n c for the constrained rho-hinge form."""
        family = MulticlassFamily.constrained(BinaryPhi(PhiTag.RHO_HINGE))
        ident = pr_single(np.zeros(3), 0.0, 0, 0.2, family, PsiTag.IDENTITY)
        scaled = pr_single(np.zeros(3), 0.0, 0, 0.2, family, PsiTag.SCALED)
        assert scaled.value - ident.value == pytest.approx(2 * 0.2)

    @pytest.mark.parametrize(
        "misclassified, r, expected",
        [(1.0, 0.0, 1.2), (0.0, 2.0, 0.2 * np.exp(-2.0))],
    )
    def test_should_match_worked_values_when_two_stage(self, misclassified, r, expected, exp_phi):
        """1{wrong} Phi(-r) + c Phi(r) with Phi = exp."""
        assert pr_two_stage(misclassified, r, 0.2, exp_phi).value == pytest.approx(expected)

    def test_should_be_minimised_at_half_log_ratio_when_exp(self, exp_phi):
        """r* = log(c / 1) / 2 for a misclassified point."""
        r_star = 0.5 * np.log(0.25)
        assert r_star == pytest.approx(-0.693147, abs=1e-6)
        assert abs(float(pr_two_stage(1.0, r_star, 0.25, exp_phi).grad["r"])) < 1e-12
        grid = np.linspace(-3, 3, 601)
        values = pr_two_stage(np.ones_like(grid), grid, 0.25, exp_phi).value
        assert pr_two_stage(1.0, r_star, 0.25, exp_phi).value <= values.min() + 1e-12

    def test_should_warn_when_combination_unendorsed(self):
        """Unequal scale constants carry no guarantee."""
        with pytest.warns(NoGuaranteeWarning):
            spec = SurrogateSpec(SurrogateTag.PR_SINGLE, family=MulticlassFamily.logistic(), c=0.3, alpha_s=2.0)
        assert spec.guarantee() == Guarantee.NO_GUARANTEE

    @pytest.mark.parametrize(
        "family, psi",
        [
            (MulticlassFamily.mae(), PsiTag.IDENTITY),
            (MulticlassFamily.margin_rho(1.0), PsiTag.IDENTITY),
            (MulticlassFamily.constrained(BinaryPhi(PhiTag.RHO_HINGE)), PsiTag.SCALED),
        ],
    )
    def test_should_not_warn_when_combination_endorsed(self, family, psi):
        """Endorsed single-stage combinations build silently."""
        with warnings.catch_warnings():
            warnings.simplefilter("error", NoGuaranteeWarning)
            spec = SurrogateSpec(SurrogateTag.PR_SINGLE, family=family, psi=psi, c=0.3)
        assert spec.guarantee() == Guarantee.ENDORSED


class TestMultiExpertDeferral:
    def test_should_reduce_to_base_loss_when_expert_cost_one(self, log_family):
        """c_1 = 1 removes the deferral term."""
        s = np.array([0.4, -0.1, 0.3])
        value = defer_single(s, 0, [1.0], log_family).value
        assert value == pytest.approx(-np.log(np.exp(0.4) / np.exp(s).sum()))

    def test_should_double_symmetric_value_when_expert_free(self, log_family):
        """c_1 = 0 at zero scores: 2 log 3."""
        assert defer_single(np.zeros(3), 0, [0.0], log_family).value == pytest.approx(2 * LOG3)

    def test_should_raise_when_costs_outnumber_scores(self, log_family):
        """Too many experts for the score vector is invalid input."""
        with pytest.raises(InvalidInputError):
            defer_single(np.zeros(2), 0, [0.1, 0.2], log_family)

    def test_should_keep_label_zero_term_when_two_stage_correct(self, log_family):
        """Only the label-0 term survives at uniform softmax."""
        value = defer_two_stage_score(0.0, np.zeros(2), 1.0, [0.0, 0.0], log_family).value
        assert value == pytest.approx(LOG3)

    def test_should_keep_expert_term_when_two_stage_wrong(self, log_family):
        """correct = 0 and cbar = (1, 0) leave the expert-1 term."""
        value = defer_two_stage_score(0.5, np.array([0.5, 0.5]), 0.0, [1.0, 0.0], log_family).value
        assert value == pytest.approx(LOG3)

    def test_should_vanish_when_all_weights_zero(self, log_family):
        """No weight, no loss."""
        assert defer_two_stage_score(0.0, np.zeros(2), 0.0, [0.0, 0.0], log_family).value == 0.0

    def test_should_use_negated_rejector_when_two_stage_pr(self, log_family):
        """Uniform softmax over (0, -r) gives log 3."""
        assert defer_two_stage_pr(np.zeros(2), 1.0, [0.0, 0.0], log_family).value == pytest.approx(LOG3)

    def test_should_vanish_when_rejector_large_and_correct(self, log_family):
        """Large r pushes the label-0 softmax to one."""
        assert defer_two_stage_pr(np.full(2, 40.0), 1.0, [0.0, 0.0], log_family).value < 1e-12

    def test_should_count_one_term_when_exponential_family(self):
        """One wrong-label term with equal scores."""
        exp_family = MulticlassFamily.exponential()
        assert defer_two_stage_pr(np.zeros(1), 0.0, [1.0], exp_family).value == pytest.approx(1.0)


class TestRegressionDeferral:
    def test_should_match_expanded_value_when_single_stage(self, log_family):
        """3.2 log 3 - 0.5 at equal scores."""
        value = reg_single(0.5, np.zeros(3), [0.2, 0.9], log_family).value
        assert value == pytest.approx(3.2 * LOG3 - 0.5, abs=1e-6)

    def test_should_skip_correction_when_two_stage(self, log_family):
        """3.2 log 3 at equal scores."""
        value = reg_two_stage(0.5, np.zeros(3), [0.2, 0.9], log_family).value
        assert value == pytest.approx(3.2 * LOG3, abs=1e-6)

    def test_should_coincide_when_single_expert(self, log_family):
        """n_e = 1 makes the correction term zero."""
        single = reg_single(0.7, np.array([0.2, -0.1]), [0.4], log_family).value
        two = reg_two_stage(0.7, np.array([0.2, -0.1]), [0.4], log_family).value
        assert single == pytest.approx(two)

    def test_should_vanish_when_costs_and_loss_zero(self, log_family):
        """No loss and free experts give zero."""
        assert reg_single(0.0, np.zeros(2), [0.0], log_family).value == pytest.approx(0.0)

    @pytest.mark.parametrize("r, expected", [(0.0, 5.0), (-np.log(2.0), 4.0)])
    def test_should_match_worked_values_when_single_expert(self, r, expected, exp_phi):
        """c Phi(r) + L Phi(-r) with L = 4, c = 1."""
        assert reg_single_expert(4.0, r, 1.0, exp_phi).value == pytest.approx(expected)

    def test_should_vanish_when_single_expert_free_and_exact(self, exp_phi):
        """L = 0 and c = 0 give zero."""
        assert reg_single_expert(0.0, 0.3, 0.0, exp_phi).value == 0.0


class TestEvaluate:
    @pytest.mark.parametrize("tag", list(SurrogateTag))
    def test_should_pass_gradient_check_when_point_smooth(self, tag, rng):
        """Analytic gradients match central differences at random points."""
        spec = _spec(tag)
        for _ in range(5):
            point = sample_inputs(spec, rng, n=3, n_e=2)
            if kink_distance(spec, point) > 1e-3:
                assert fd_check(spec, point) < 1e-5

    @pytest.mark.parametrize("tag", list(FROZEN))
    def test_should_zero_frozen_gradients_when_two_stage(self, tag, rng):
        """Frozen inputs report an all-zero gradient."""
        spec = _spec(tag)
        result = evaluate(spec, sample_inputs(spec, rng, n=3, n_e=2))
        for name in FROZEN[tag]:
            assert np.all(np.asarray(result.grad[name]) == 0.0)

    @pytest.mark.parametrize("tag", list(SurrogateTag))
    def test_should_report_every_trainable_gradient(self, tag, rng):
        """Each trainable input has a gradient entry."""
        spec = _spec(tag)
        result = evaluate(spec, sample_inputs(spec, rng, n=3, n_e=2))
        assert set(TRAINABLE[tag]) <= set(result.grad)

    def test_should_raise_when_input_missing(self):
        """A missing named input is invalid input."""
        with pytest.raises(InvalidInputError):
            evaluate(_spec(SurrogateTag.DEFER_SINGLE), {"scores": np.zeros(3)})

    def test_should_raise_when_family_missing(self):
        """Family-based surrogates need a family."""
        with pytest.raises(InvalidParameterError):
            SurrogateSpec(SurrogateTag.DEFER_SINGLE)

    def test_should_check_hinge_at_smooth_point(self):
        """pr_two_stage with hinge at r = 1.5 is away from the kink."""
        spec = SurrogateSpec(SurrogateTag.PR_TWO_STAGE, phi=BinaryPhi(PhiTag.HINGE), c=0.3)
        assert fd_check(spec, {"misclassified": 1.0, "r": 1.5}) < 1e-5

    def test_should_use_per_sample_cost_when_given(self, exp_phi):
        """A ``c`` input overrides the surrogate's cost row by row."""
        spec = SurrogateSpec(SurrogateTag.PR_TWO_STAGE, phi=exp_phi, c=0.3)
        r = np.array([0.5, -0.5])
        result = evaluate(spec, {"misclassified": np.zeros(2), "r": r, "c": np.array([0.0, 0.2])})
        np.testing.assert_allclose(result.value, [0.0, 0.2 * np.exp(0.5)])

    def test_should_return_batch_values_when_batched(self, log_family):
        """A leading batch axis returns one value per row."""
        spec = SurrogateSpec(SurrogateTag.DEFER_SINGLE, family=log_family)
        result = evaluate(spec, {"scores": np.zeros((4, 3)), "y": np.zeros(4, dtype=int), "costs": np.zeros((4, 1))})
        assert result.value == pytest.approx([2 * LOG3] * 4)

    def test_should_choose_argmin_convention_when_two_stage_pr(self, log_family):
        """defer_two_stage_pr routes with the argmin convention."""
        spec = SurrogateSpec(SurrogateTag.DEFER_TWO_STAGE_PR, family=log_family)
        assert spec.convention.value == "argmin_defer"
        assert spec.family.tag == FamilyTag.COMP_SUM
