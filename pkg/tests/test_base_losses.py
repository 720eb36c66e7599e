import numpy as np
import pytest

from deferral.base_losses import (
    LOG2,
    BinaryPhi,
    FamilyTag,
    MulticlassFamily,
    PhiTag,
    ell_mu_value,
    family_grad,
    family_value,
    phi_grad,
    phi_value,
    weighted_family,
)
from deferral.errors import InvalidInputError, InvalidParameterError

LOG3 = float(np.log(3.0))


class TestPhi:
    @pytest.mark.parametrize(
        "tag, u, expected",
        [(PhiTag.EXP, 0.0, 1.0), (PhiTag.HINGE, 2.0, 0.0), (PhiTag.LOGISTIC, 0.0, LOG2)],
    )
    def test_should_match_reference_values_when_evaluated(self, tag, u, expected):
        """Common margin losses at their reference points."""
        assert phi_value(BinaryPhi(tag), u) == pytest.approx(expected)

    @pytest.mark.parametrize("tag", list(PhiTag))
    def test_should_be_non_increasing_when_margin_grows(self, tag):
        """Every Phi is non-increasing in the margin."""
        u = np.linspace(-3, 3, 61)
        values = phi_value(BinaryPhi(tag, k=2.0, rho=0.5), u)
        assert np.all(np.diff(values) <= 1e-12)

    @pytest.mark.parametrize("tag", [PhiTag.EXP, PhiTag.LOGISTIC, PhiTag.SIGMOID, PhiTag.QUADRATIC])
    def test_should_match_finite_differences_when_smooth(self, tag):
        """Analytic derivative against central differences away from kinks."""
        phi = BinaryPhi(tag, k=1.5)
        u = np.array([-1.3, -0.2, 0.4, 0.7])
        fd = (phi_value(phi, u + 1e-6) - phi_value(phi, u - 1e-6)) / 2e-6
        np.testing.assert_allclose(phi_grad(phi, u), fd, rtol=1e-5, atol=1e-7)

    def test_should_bound_zero_one_loss_when_logistic_rescaled(self):
        """Logistic Phi / log 2 dominates 1{u <= 0}."""
        phi = BinaryPhi(PhiTag.LOGISTIC)
        u = np.linspace(-4, 0, 41)
        assert np.all(phi.zero_one_scale * phi_value(phi, u) >= 1.0 - 1e-12)

    @pytest.mark.parametrize("field", ["k", "rho"])
    def test_should_raise_when_scale_not_positive(self, field):
        """Sigmoid steepness and rho must be positive."""
        with pytest.raises(InvalidParameterError):
            BinaryPhi(PhiTag.SIGMOID, **{field: 0.0})


class TestCompSum:
    def test_should_equal_log_k_when_scores_equal_and_logistic(self):
        """Uniform softmax over three labels gives log 3."""
        assert ell_mu_value(np.zeros(3), 1, 1.0) == pytest.approx(LOG3)

    def test_should_equal_mae_when_mu_two(self):
        """mu = 2 is the MAE 1 - softmax_y."""
        assert ell_mu_value(np.zeros(3), 2, 2.0) == pytest.approx(2.0 / 3.0)

    def test_should_match_closed_form_when_scores_unequal(self):
        """log(1 + 2 e^-2) for scores (2, 0, 0) and target 0."""
        assert ell_mu_value(np.array([2.0, 0.0, 0.0]), 0, 1.0) == pytest.approx(np.log(1 + 2 * np.exp(-2.0)))

    def test_should_raise_when_mu_negative(self):
        """mu < 0 is an invalid parameter."""
        with pytest.raises(InvalidParameterError):
            MulticlassFamily.comp_sum(-0.5)

    def test_should_raise_when_target_out_of_range(self):
        """Targets must index the score vector."""
        with pytest.raises(InvalidInputError):
            ell_mu_value(np.zeros(3), 3, 1.0)

    def test_should_stay_finite_when_scores_large(self):
        """Large scores do not overflow the log-sum-exp."""
        assert np.isfinite(ell_mu_value(np.array([800.0, -800.0, 0.0]), 1, 1.0))


class TestOtherFamilies:
    def test_should_sum_wrong_label_terms_when_sum_loss(self):
        """sum(exp) over two labels with equal scores has one term e^0."""
        family = MulticlassFamily.sum_loss(BinaryPhi(PhiTag.EXP))
        assert family_value(family, np.zeros(2), 0) == pytest.approx(1.0)

    def test_should_count_hinge_terms_when_constrained_at_zero(self):
        """Zero scores satisfy the constraint; each wrong label contributes 1."""
        family = MulticlassFamily.constrained(BinaryPhi(PhiTag.HINGE))
        assert family_value(family, np.zeros(3), 0) == pytest.approx(2.0)

    def test_should_vanish_when_margin_exceeds_rho(self):
        """sum(rho-margin) is zero past the margin."""
        family = MulticlassFamily.sum_loss(BinaryPhi(PhiTag.RHO_MARGIN, rho=1.0))
        assert family_value(family, np.array([5.0, 0.0]), 0) == pytest.approx(0.0)

    def test_should_use_one_plus_alpha_when_gce_effective_mu(self):
        """GCE shares the comp-sum conditional risk at mu = 1 + alpha."""
        assert MulticlassFamily.gce(0.7).effective_mu == pytest.approx(1.7)

    def test_should_raise_when_sum_family_lacks_inner(self):
        """The sum family needs a margin-based inner Phi."""
        with pytest.raises(InvalidParameterError):
            MulticlassFamily(tag=FamilyTag.SUM)

    @pytest.mark.parametrize(
        "family",
        [
            MulticlassFamily.comp_sum(0.0),
            MulticlassFamily.comp_sum(0.5),
            MulticlassFamily.logistic(),
            MulticlassFamily.comp_sum(1.5),
            MulticlassFamily.mae(),
            MulticlassFamily.gce(0.5),
            MulticlassFamily.sum_loss(BinaryPhi(PhiTag.LOGISTIC)),
            MulticlassFamily.constrained(BinaryPhi(PhiTag.EXP)),
        ],
        ids=lambda f: f.label,
    )
    def test_should_match_finite_differences_when_smooth_family(self, family):
        """Analytic score gradients against central differences."""
        s = np.array([0.3, -0.4, 1.1, 0.2])
        grad = family_grad(family, s, 2)
        fd = np.array([
            (family_value(family, s + 1e-6 * e, 2) - family_value(family, s - 1e-6 * e, 2)) / 2e-6
            for e in np.eye(4)
        ])
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-7)

    @pytest.mark.parametrize(
        "family",
        [
            MulticlassFamily.comp_sum(0.0),
            MulticlassFamily.sum_loss(BinaryPhi(PhiTag.HINGE)),
            MulticlassFamily.constrained(BinaryPhi(PhiTag.RHO_HINGE)),
            MulticlassFamily.margin_rho(1.0),
        ],
        ids=lambda f: f.label,
    )
    def test_should_dominate_zero_one_loss_when_family_flagged(self, family, rng):
        """Families flagged as dominating the 0-1 loss upper-bound it."""
        assert family.dominates_zero_one
        s = rng.uniform(-2, 2, (200, 3))
        y = rng.integers(0, 3, 200)
        zero_one = (np.argmax(s, axis=1) != y).astype(float)
        assert np.all(family_value(family, s, y) >= zero_one - 1e-12)


class TestWeightedFamily:
    def test_should_sum_weighted_targets_when_weights_given(self, log_family):
        """Equal scores give log 3 times the weight total."""
        value, grad = weighted_family(log_family, np.zeros((1, 3)), np.array([[1.0, 0.5, 0.0]]))
        assert value[0] == pytest.approx(1.5 * LOG3)
        assert grad.shape == (1, 3)

    def test_should_raise_when_weight_shape_mismatches(self, log_family):
        """Weights must match the score shape."""
        with pytest.raises(InvalidInputError):
            weighted_family(log_family, np.zeros((2, 3)), np.ones((2, 2)))
