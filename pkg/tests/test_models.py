"""
Tests for beliefs, integrators and state-space models.
"""

import numpy as np
import pytest

from compositional_inference.exceptions import InvalidParams, NonFinite
from compositional_inference.models import (
    GaussianBelief,
    IntegratorKind,
    StateSpaceModel,
    augment_belief,
    heun_corrector,
    heun_predictor,
    integrate_step,
    linear_model,
)


def decay(x, u):
    return -x + u


class TestGaussianBelief:
    """Test Gaussian belief validation."""

    def test_valid_belief(self):
        """Test a well-formed belief exposes dim and std."""
        belief = GaussianBelief(np.array([1.0, 2.0]), np.diag([4.0, 9.0]))
        assert belief.dim == 2
        np.testing.assert_allclose(belief.std(), [2.0, 3.0])

    def test_shape_mismatch(self):
        """Test that a covariance of the wrong size is rejected."""
        with pytest.raises(ValueError):
            GaussianBelief(np.zeros(2), np.eye(3))

    def test_nan_mean(self):
        """Test that a NaN mean is rejected."""
        with pytest.raises(NonFinite):
            GaussianBelief(np.array([np.nan]), np.eye(1))

    def test_asymmetric_covariance(self):
        """Test that an asymmetric covariance is rejected."""
        with pytest.raises(ValueError):
            GaussianBelief(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_marginal(self):
        """Test extraction of a sub-belief."""
        cov = np.array([[1.0, 0.2, 0.0], [0.2, 2.0, 0.3], [0.0, 0.3, 3.0]])
        belief = GaussianBelief(np.array([1.0, 2.0, 3.0]), cov)
        marginal = belief.marginal([0, 2])
        np.testing.assert_array_equal(marginal.mean, [1.0, 3.0])
        np.testing.assert_array_equal(marginal.cov, [[1.0, 0.0], [0.0, 3.0]])


class TestIntegrators:
    """Test the explicit integrators."""

    def test_euler_step(self):
        """Test one Euler step of x' = -x."""
        x_next, f0 = integrate_step(IntegratorKind.EULER, decay, np.array([1.0]), np.array([0.0]), 0.1)
        np.testing.assert_allclose(x_next, [0.9])
        np.testing.assert_allclose(f0, [-1.0])

    def test_heun_step(self):
        """Test one Heun step equals the second-order Taylor polynomial for x' = -x."""
        dt = 0.1
        x_next, _ = integrate_step(IntegratorKind.HEUN, decay, np.array([1.0]), np.array([0.0]), dt)
        np.testing.assert_allclose(x_next, [1.0 - dt + dt * dt / 2.0])

    def test_predictor_corrector_split(self):
        """Test the two Heun stages compose to a full Heun step."""
        x, u, dt = np.array([2.0]), np.array([0.5]), 0.05
        x_pred, f0 = heun_predictor(decay, x, u, dt)
        split = heun_corrector(decay, x, f0, x_pred, u, dt)
        full, _ = integrate_step(IntegratorKind.HEUN, decay, x, u, dt)
        np.testing.assert_allclose(split, full, rtol=0, atol=1e-15)

    def test_ab2_uses_previous_derivative(self):
        """Test the Adams-Bashforth update with a supplied history."""
        x = np.array([1.0])
        x_next, f0 = integrate_step(IntegratorKind.AB2, decay, x, np.array([0.0]), 0.1, prev_f=np.array([-1.2]))
        np.testing.assert_allclose(x_next, [1.0 + 0.1 * (1.5 * -1.0 - 0.5 * -1.2)])
        np.testing.assert_allclose(f0, [-1.0])

    def test_ab2_bootstraps_with_heun(self):
        """Test that AB2 without history takes a Heun step."""
        args = (decay, np.array([1.0]), np.array([0.0]), 0.1)
        ab2, _ = integrate_step(IntegratorKind.AB2, *args)
        heun, _ = integrate_step(IntegratorKind.HEUN, *args)
        np.testing.assert_array_equal(ab2, heun)

    def test_heun_second_order_convergence(self):
        """Test that halving dt cuts the Heun error by about four."""
        def error(dt):
            x = np.array([1.0])
            for _ in range(int(round(1.0 / dt))):
                x, _ = integrate_step(IntegratorKind.HEUN, decay, x, np.array([0.0]), dt)
            return abs(x[0] - np.exp(-1.0))

        ratio = error(0.02) / error(0.01)
        assert 3.5 < ratio < 4.5

    def test_non_positive_dt(self):
        """Test that dt must be positive."""
        with pytest.raises(ValueError):
            integrate_step(IntegratorKind.EULER, decay, np.zeros(1), np.zeros(1), 0.0)

    def test_non_finite_derivative(self):
        """Test that an exploding derivative map raises NonFinite."""
        with pytest.raises(NonFinite):
            integrate_step(IntegratorKind.EULER, lambda x, u: x * np.inf, np.ones(1), np.zeros(1), 0.1)


class TestStateSpaceModel:
    """Test model validation and stepping."""

    def test_continuous_step_uses_integrator(self):
        """Test that a continuous model integrates its derivative map."""
        model = StateSpaceModel(
            1, 1, decay, lambda x, u: x, q=[[0.0]], r=[[1.0]], dt=0.1,
            continuous=True, integrator=IntegratorKind.EULER,
        )
        np.testing.assert_allclose(model.step([1.0], [0.0]), [0.9])
        np.testing.assert_allclose(model.derivative([1.0], [1.0]), [0.0])

    def test_discrete_model_has_no_derivative(self):
        """Test that a discrete model refuses a derivative query."""
        model = linear_model([[1.0]], [[1.0]], q=[[0.0]], r=[[1.0]])
        with pytest.raises(NotImplementedError):
            model.derivative([0.0])

    def test_ab2_model_step_refused(self):
        """Test that AB2 models cannot step without derivative memory."""
        model = StateSpaceModel(
            1, 1, decay, lambda x, u: x, q=[[0.0]], r=[[1.0]], dt=0.1,
            continuous=True, integrator=IntegratorKind.AB2,
        )
        with pytest.raises(NotImplementedError):
            model.step([1.0], [0.0])

    def test_negative_q_rejected(self):
        """Test that an indefinite process noise is rejected."""
        with pytest.raises(InvalidParams):
            linear_model(np.eye(2), np.eye(2), q=np.diag([1.0, -1.0]), r=np.eye(2))

    def test_q_shape_rejected(self):
        """Test that q must match the state dimension."""
        with pytest.raises(InvalidParams):
            linear_model(np.eye(2), np.eye(2), q=np.eye(3), r=np.eye(2))

    def test_inconsistent_linear_shapes(self):
        """Test that H with the wrong column count is rejected."""
        with pytest.raises(InvalidParams):
            linear_model(np.eye(2), np.ones((1, 3)), q=np.eye(2), r=np.eye(1))

    def test_linear_model_with_input(self):
        """Test the linear transition with an input matrix."""
        model = linear_model(np.eye(2), np.eye(2), q=np.zeros((2, 2)), r=np.eye(2), input_matrix=[[1.0], [0.0]])
        assert model.is_linear
        assert model.obs_dim == 2
        np.testing.assert_allclose(model.step([1.0, 1.0], [2.0]), [3.0, 1.0])

    def test_with_q_replaces_noise(self):
        """Test that with_q returns a copy with the new process noise."""
        model = linear_model(np.eye(1), np.eye(1), q=[[0.0]], r=[[1.0]])
        assert model.with_q([[2.0]]).q[0, 0] == 2.0
        assert model.q[0, 0] == 0.0


class TestAugmentBelief:
    """Test state augmentation with unknown parameters."""

    def test_block_diagonal(self):
        """Test that parameters are appended uncorrelated."""
        belief = GaussianBelief(np.array([1.0, 2.0]), np.array([[1.0, 0.1], [0.1, 1.0]]))
        augmented = augment_belief(belief, [3.0e4], [0.04])
        assert augmented.dim == 3
        assert augmented.mean[2] == 3.0e4
        assert augmented.cov[2, 2] == 0.04
        np.testing.assert_array_equal(augmented.cov[2, :2], [0.0, 0.0])

    def test_no_parameters(self):
        """Test that an empty augmentation returns the belief unchanged."""
        belief = GaussianBelief(np.zeros(1), np.eye(1))
        assert augment_belief(belief, [], []) is belief

    def test_non_positive_variance(self):
        """Test that parameter variances must be positive."""
        with pytest.raises(InvalidParams):
            augment_belief(GaussianBelief(np.zeros(1), np.eye(1)), [1.0], [0.0])
