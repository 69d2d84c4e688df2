import numpy as np
import pytest

from compositional_inference.estimators import (
    EstimatorKind,
    UkfParams,
    ekf_step,
    estimator_predict,
    estimator_update,
    kf_step,
    numeric_jacobian,
    ukf_sigma_points,
    ukf_step,
    wls_step,
    wnls_step,
)
from compositional_inference.exceptions import InvalidParams, RankDeficient
from compositional_inference.models import GaussianBelief, StateSpaceModel, linear_model
from compositional_inference.numerics import make_rng


def random_linear_system(seed=0, n=4, m=2):
    rng = make_rng(seed)
    a = rng.normal(size=(n, n))
    transition = 0.9 * a / max(abs(np.linalg.eigvals(a)))
    measurement = rng.normal(size=(m, n))
    q = 0.01 * np.eye(n)
    r = 0.1 * np.eye(m)
    return linear_model(transition, measurement, q, r), rng


def simulate(model, rng, steps=100):
    x = np.zeros(model.state_dim)
    observations = []
    for _ in range(steps):
        x = model.step(x) + rng.multivariate_normal(np.zeros(model.state_dim), model.q)
        observations.append(model.observe(x) + rng.multivariate_normal(np.zeros(model.obs_dim), model.r))
    return observations


class TestSigmaPoints:
    """Test the unscented transform."""

    def test_reconstructs_moments(self):
        """Test that the weighted sigma points reproduce mean and covariance."""
        cov = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.1], [0.0, 0.1, 0.5]])
        belief = GaussianBelief(np.array([1.0, -2.0, 0.5]), cov)
        sigma = ukf_sigma_points(belief, UkfParams(alpha=0.5, beta=2.0, kappa=1.0))
        assert sigma.points.shape == (7, 3)
        mean = sigma.w_mean @ sigma.points
        dev = sigma.points - mean
        np.testing.assert_allclose(mean, belief.mean, atol=1e-12)
        np.testing.assert_allclose(sigma.w_mean.sum(), 1.0, atol=1e-12)
        np.testing.assert_allclose(dev.T @ (sigma.w_mean[:, None] * dev), cov, atol=1e-12)

    def test_gamma_presets(self):
        """Test both gamma presets map to the default scaling."""
        for gamma in (0, 1):
            params = UkfParams.from_gamma(gamma)
            assert (params.alpha, params.beta, params.kappa) == (1.0, 2.0, 0.0)
        with pytest.raises(InvalidParams):
            UkfParams.from_gamma(2)

    def test_non_positive_spread(self):
        """Test that L + lambda <= 0 is rejected."""
        belief = GaussianBelief(np.zeros(2), np.eye(2))
        with pytest.raises(InvalidParams):
            ukf_sigma_points(belief, UkfParams(alpha=1.0, kappa=-2.0))


class TestLinearEquivalence:
    """Test that the nonlinear filters collapse to the Kalman filter on linear models."""

    def test_ukf_and_ekf_match_kf(self):
        """Test UKF and EKF posteriors against KF over 100 steps."""
        model, rng = random_linear_system()
        observations = simulate(model, rng)
        kf = ekf = ukf = GaussianBelief(np.zeros(4), np.eye(4))
        for y in observations:
            kf = kf_step(model, kf, None, y)
            ekf = ekf_step(model, ekf, None, y)
            ukf = ukf_step(model, ukf, None, y, UkfParams())
            np.testing.assert_allclose(ekf.mean, kf.mean, atol=1e-10)
            np.testing.assert_allclose(ekf.cov, kf.cov, atol=1e-10)
            np.testing.assert_allclose(ukf.mean, kf.mean, atol=1e-8)
            np.testing.assert_allclose(ukf.cov, kf.cov, atol=1e-8)

    def test_numeric_jacobian_ekf(self):
        """Test the finite-difference EKF on a linear model without analytic Jacobians."""
        model, rng = random_linear_system(seed=3)
        bare = StateSpaceModel(
            4, 0, model.transition, model.measurement, model.q, model.r, dt=1.0,
            transition_matrix=model.transition_matrix, measurement_matrix=model.measurement_matrix,
        )
        observations = simulate(model, rng, steps=20)
        kf = ekf = GaussianBelief(np.zeros(4), np.eye(4))
        for y in observations:
            kf = kf_step(model, kf, None, y)
            ekf = ekf_step(bare, ekf, None, y)
        np.testing.assert_allclose(ekf.mean, kf.mean, atol=1e-6)

    def test_kf_posterior_shrinks(self):
        """Test that the KF posterior variance never exceeds the prior's."""
        model, rng = random_linear_system(seed=1)
        belief = GaussianBelief(np.zeros(4), 10.0 * np.eye(4))
        y = simulate(model, rng, steps=1)[0]
        posterior = kf_step(model, belief, None, y)
        prior_trace = np.trace(model.transition_matrix @ belief.cov @ model.transition_matrix.T + model.q)
        assert np.trace(posterior.cov) < prior_trace

    def test_kf_requires_linear_model(self):
        """Test that the KF rejects models without matrices."""
        model = StateSpaceModel(1, 0, lambda x, u: x, lambda x, u: x, q=[[0.0]], r=[[1.0]], dt=1.0)
        with pytest.raises(InvalidParams):
            kf_step(model, GaussianBelief(np.zeros(1), np.eye(1)), None, [0.0])


class TestNumericJacobian:
    """Test the central-difference Jacobian."""

    def test_quadratic(self):
        """Test the Jacobian of an elementwise square."""
        jac = numeric_jacobian(lambda x: x ** 2, np.array([1.0, 3.0]))
        np.testing.assert_allclose(jac, np.diag([2.0, 6.0]), atol=1e-6)


class TestLeastSquares:
    """Test the WLS and WNLS point estimators."""

    def test_wls_recovers_exact_state(self):
        """Test that noise-free measurements are inverted exactly."""
        model = linear_model(np.eye(2), np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 2.0]]), np.zeros((2, 2)), np.eye(3))
        truth = np.array([0.7, -1.3])
        estimate = wls_step(model, np.zeros(2), model.observe(truth))
        np.testing.assert_allclose(estimate, truth, atol=1e-12)

    def test_wnls_equals_wls_on_linear_model(self):
        """Test that damped Gauss-Newton stops at the WLS solution."""
        model, rng = random_linear_system(seed=2, n=2, m=3)
        y = simulate(model, rng, steps=1)[0]
        x0 = np.array([0.3, -0.2])
        np.testing.assert_allclose(wnls_step(model, x0, y), wls_step(model, x0, y), atol=1e-10)

    def test_wnls_nonlinear(self):
        """Test WNLS on a cubic measurement."""
        model = StateSpaceModel(
            1, 0, lambda x, u: x, lambda x, u: np.array([x[0] ** 3 + x[0]]),
            q=[[0.0]], r=[[1e-4]], dt=1.0,
        )
        estimate = wnls_step(model, np.array([0.5]), np.array([10.0]), iters=20)
        np.testing.assert_allclose(estimate, [2.0], atol=1e-8)

    def test_rank_deficient(self):
        """Test that an unobservable state raises RankDeficient."""
        model = linear_model(np.eye(2), np.array([[1.0, 0.0]]), np.zeros((2, 2)), np.eye(1))
        with pytest.raises(RankDeficient):
            wls_step(model, np.zeros(2), np.array([1.0]))

    def test_wnls_parameter_checks(self):
        """Test iteration count and damping validation."""
        model = linear_model(np.eye(1), np.eye(1), [[0.0]], [[1.0]])
        with pytest.raises(InvalidParams):
            wnls_step(model, [0.0], [1.0], iters=0)
        with pytest.raises(InvalidParams):
            wnls_step(model, [0.0], [1.0], damping=1.0)


class TestDispatch:
    """Test estimator dispatch by kind."""

    def test_point_estimators_keep_covariance(self):
        """Test that WLS carries the covariance through unchanged."""
        model = linear_model(2.0 * np.eye(1), np.eye(1), [[0.0]], [[1.0]])
        belief = GaussianBelief(np.array([1.0]), np.array([[3.0]]))
        predicted = estimator_predict(EstimatorKind.WLS, model, belief, None, UkfParams())
        assert predicted.mean[0] == 2.0
        assert predicted.cov[0, 0] == 3.0
        updated = estimator_update(EstimatorKind.WLS, model, predicted, None, np.array([5.0]), UkfParams())
        np.testing.assert_allclose(updated.mean, [5.0])
        assert updated.cov[0, 0] == 3.0

    def test_deterministic_ignores_measurement(self):
        """Test that the deterministic kind returns the prediction."""
        model = linear_model(np.eye(1), np.eye(1), [[0.0]], [[1.0]])
        belief = GaussianBelief(np.array([1.0]), np.array([[1.0]]))
        updated = estimator_update(EstimatorKind.DETERMINISTIC, model, belief, None, np.array([9.0]), UkfParams())
        assert updated is belief
