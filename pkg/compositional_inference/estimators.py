"""
Kalman-family estimators and least-squares baselines.

Each filter is split into a predict and an update half so that schedules can
repeat the prediction over several coupling sweeps before assimilating the
measurement once. ``kf_step``, ``ekf_step`` and ``ukf_step`` chain both halves.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.linalg

from compositional_inference.exceptions import InvalidParams, NonConvergence, RankDeficient
from compositional_inference.models import GaussianBelief, StateSpaceModel
from compositional_inference.numerics import cholesky, symmetrize

logger = logging.getLogger(__name__)

JacobianPair = Tuple[Optional[Callable], Optional[Callable]]


class EstimatorKind(Enum):
    KF = "kf"
    EKF = "ekf"
    UKF = "ukf"
    WLS = "wls"
    WNLS = "wnls"
    DETERMINISTIC = "deterministic"


@dataclass(frozen=True)
class UkfParams:
    """Unscented transform scaling (alpha, beta, kappa)."""

    alpha: float = 1.0
    beta: float = 2.0
    kappa: float = 0.0
    gamma_preset: Optional[int] = None

    @classmethod
    def from_gamma(cls, gamma: int) -> "UkfParams":
        """Both documented presets map to (alpha, beta, kappa) = (1, 2, 0)."""
        if gamma not in (0, 1):
            raise InvalidParams(f"Unknown UKF gamma preset {gamma}; expected 0 or 1")
        return cls(1.0, 2.0, 0.0, gamma_preset=gamma)

    def lam(self, dim: int) -> float:
        return self.alpha ** 2 * (dim + self.kappa) - dim


@dataclass(frozen=True)
class SigmaSet:
    points: np.ndarray
    w_mean: np.ndarray
    w_cov: np.ndarray


def ukf_sigma_points(belief: GaussianBelief, params: UkfParams = UkfParams()) -> SigmaSet:
    """
    Symmetric 2L+1 sigma points for ``belief``.

    Args:
        belief: Belief with SPD covariance
        params: Scaling parameters

    Returns:
        Points stacked row-wise with their mean and covariance weights

    Raises:
        InvalidParams: If L + lambda is not positive
        NotSPD: If the scaled covariance cannot be factorised
    """
    dim = belief.dim
    lam = params.lam(dim)
    spread = dim + lam
    if spread <= 0:
        raise InvalidParams(f"L + lambda must be positive, got {spread} for L={dim}")
    factor = cholesky(spread * belief.cov)
    points = np.vstack([belief.mean, belief.mean + factor.T, belief.mean - factor.T])
    w_mean = np.full(2 * dim + 1, 1.0 / (2.0 * spread))
    w_mean[0] = lam / spread
    w_cov = w_mean.copy()
    w_cov[0] += 1.0 - params.alpha ** 2 + params.beta
    return SigmaSet(points, w_mean, w_cov)


def _gain(cross: np.ndarray, innovation_cov: np.ndarray) -> np.ndarray:
    """K = Pxy S⁻¹ via a Cholesky solve; NotSPD if S is not positive definite."""
    factor = cholesky(innovation_cov)
    return scipy.linalg.cho_solve((factor, True), cross.T).T


def _posterior(model, x_pred, p_pred, gain, innovation, innovation_cov) -> GaussianBelief:
    mean = model.normalize(x_pred + gain @ innovation)
    cov = symmetrize(p_pred - gain @ innovation_cov @ gain.T)
    return GaussianBelief(mean, cov)


def numeric_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    """Central differences with step max(1e-6, 1e-6·|x_k|) per component."""
    x = np.asarray(x, dtype=float)
    columns = []
    for k in range(x.shape[0]):
        h = max(1e-6, 1e-6 * abs(x[k]))
        e = np.zeros_like(x)
        e[k] = h
        columns.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2.0 * h))
    return np.column_stack(columns) if columns else np.zeros((0, 0))


def _require_linear(model: StateSpaceModel):
    if not model.is_linear:
        raise InvalidParams(f"Model '{model.name}' has no transition/measurement matrices")


def kf_predict(model: StateSpaceModel, belief: GaussianBelief, u=None) -> GaussianBelief:
    _require_linear(model)
    m = model.transition_matrix
    mean = model.step(belief.mean, u)
    return GaussianBelief(mean, symmetrize(m @ belief.cov @ m.T + model.q))


def kf_update(model: StateSpaceModel, predicted: GaussianBelief, u, y) -> GaussianBelief:
    _require_linear(model)
    h = model.measurement_matrix
    s = h @ predicted.cov @ h.T + model.r
    gain = _gain(predicted.cov @ h.T, s)
    innovation = model.residual(y, h @ predicted.mean)
    return _posterior(model, predicted.mean, predicted.cov, gain, innovation, s)


def kf_step(model: StateSpaceModel, belief: GaussianBelief, u, y) -> GaussianBelief:
    """
    Linear Kalman filter predict/update.

    Args:
        model: Linear model carrying M (and optionally B) and H
        belief: Posterior from the previous step
        u: Input for this step
        y: Observation

    Returns:
        Posterior belief
    """
    return kf_update(model, kf_predict(model, belief, u), u, y)


def ekf_predict(model, belief, u=None, jacobians: Optional[JacobianPair] = None) -> GaussianBelief:
    u = model.input_vector(u)
    transition_jac = (jacobians[0] if jacobians else None) or model.transition_jacobian
    if transition_jac is not None:
        m = np.asarray(transition_jac(belief.mean, u), dtype=float)
    else:
        m = numeric_jacobian(lambda x: model.step(x, u), belief.mean)
    mean = model.step(belief.mean, u)
    return GaussianBelief(mean, symmetrize(m @ belief.cov @ m.T + model.q))


def ekf_update(model, predicted, u, y, jacobians: Optional[JacobianPair] = None) -> GaussianBelief:
    u = model.input_vector(u)
    measurement_jac = (jacobians[1] if jacobians else None) or model.measurement_jacobian
    if measurement_jac is not None:
        h = np.asarray(measurement_jac(predicted.mean, u), dtype=float)
    else:
        h = numeric_jacobian(lambda x: model.observe(x, u), predicted.mean)
    s = h @ predicted.cov @ h.T + model.r
    gain = _gain(predicted.cov @ h.T, s)
    innovation = model.residual(y, model.observe(predicted.mean, u))
    return _posterior(model, predicted.mean, predicted.cov, gain, innovation, s)


def ekf_step(model, belief, u, y, jacobians: Optional[JacobianPair] = None) -> GaussianBelief:
    """
    Extended Kalman filter step.

    Jacobians are the analytic pair (transition, measurement) when given,
    otherwise the model's own, otherwise central differences. The transition
    Jacobian is taken at the prior mean and the measurement Jacobian at the
    predicted mean.
    """
    predicted = ekf_predict(model, belief, u, jacobians)
    return ekf_update(model, predicted, u, y, jacobians)


def ukf_predict(model, belief, u=None, params: UkfParams = UkfParams()) -> GaussianBelief:
    u = model.input_vector(u)
    sigma = ukf_sigma_points(belief, params)
    propagated = np.array([model.step(point, u) for point in sigma.points])
    mean = sigma.w_mean @ propagated
    deviations = propagated - mean
    cov = deviations.T @ (sigma.w_cov[:, None] * deviations) + model.q
    return GaussianBelief(mean, symmetrize(cov))


def ukf_update(model, predicted, u, y, params: UkfParams = UkfParams()) -> GaussianBelief:
    u = model.input_vector(u)
    # Sigma points are redrawn from the predicted belief so Q enters the update.
    sigma = ukf_sigma_points(predicted, params)
    observed = np.array([model.observe(point, u) for point in sigma.points])
    y_hat = sigma.w_mean @ observed
    obs_dev = np.array([model.residual(row, y_hat) for row in observed])
    state_dev = sigma.points - predicted.mean
    s = obs_dev.T @ (sigma.w_cov[:, None] * obs_dev) + model.r
    cross = state_dev.T @ (sigma.w_cov[:, None] * obs_dev)
    gain = _gain(cross, symmetrize(s))
    innovation = model.residual(y, y_hat)
    return _posterior(model, predicted.mean, predicted.cov, gain, innovation, s)


def ukf_step(model, belief, u, y, params: UkfParams = UkfParams()) -> GaussianBelief:
    """
    Unscented Kalman filter step.

    Args:
        model: Subsystem model (discrete, or continuous with Euler/Heun)
        belief: Posterior from the previous step
        u: Input held constant over the step
        y: Observation
        params: Unscented scaling

    Returns:
        Posterior belief
    """
    predicted = ukf_predict(model, belief, u, params)
    return ukf_update(model, predicted, u, y, params)


def _whitened_system(model: StateSpaceModel, x, y, u):
    u = model.input_vector(u)
    if model.measurement_jacobian is not None:
        h = np.asarray(model.measurement_jacobian(x, u), dtype=float)
    else:
        h = numeric_jacobian(lambda z: model.observe(z, u), x)
    residual = model.residual(y, model.observe(x, u))
    factor = cholesky(model.r)
    h_w = scipy.linalg.solve_triangular(factor, h, lower=True)
    r_w = scipy.linalg.solve_triangular(factor, residual, lower=True)
    return h_w, r_w


def _gauss_newton_increment(model, x, y, u) -> np.ndarray:
    h_w, r_w = _whitened_system(model, x, y, u)
    rank = np.linalg.matrix_rank(h_w)
    if rank < x.shape[0]:
        logger.error(f"Measurement Jacobian rank {rank} < state dimension {x.shape[0]}")
        raise RankDeficient(
            f"Measurement Jacobian has rank {rank}, state dimension is {x.shape[0]}"
        )
    normal = h_w.T @ h_w
    return scipy.linalg.solve(normal, h_w.T @ r_w, assume_a="pos")


def _weighted_cost(model, x, y, u) -> float:
    _, r_w = _whitened_system(model, x, y, u)
    return float(r_w @ r_w)


def wls_step(model: StateSpaceModel, x_pred, y, u=None) -> np.ndarray:
    """
    One weighted least-squares correction (weights R⁻¹) around ``x_pred``.

    Raises:
        RankDeficient: If the measurement Jacobian lacks full column rank
    """
    x = np.asarray(x_pred, dtype=float)
    return model.normalize(x + _gauss_newton_increment(model, x, y, u))


def wnls_step(
    model: StateSpaceModel, x_pred, y, u=None, iters: int = 5, damping: float = 0.5, max_backtracks: int = 10
) -> np.ndarray:
    """
    Damped Gauss-Newton weighted nonlinear least squares.

    Each iteration re-linearises at the current iterate and takes the full
    step when it does not increase the weighted residual, otherwise shrinks
    it by ``damping`` up to ``max_backtracks`` times.

    Raises:
        RankDeficient: As ``wls_step``
        NonConvergence: If no damped step reduces the residual
    """
    if iters < 1:
        raise InvalidParams(f"iters must be at least 1, got {iters}")
    if not 0.0 < damping < 1.0:
        raise InvalidParams(f"damping must lie in (0, 1), got {damping}")
    x = np.asarray(x_pred, dtype=float)
    cost = _weighted_cost(model, x, y, u)
    for iteration in range(iters):
        delta = _gauss_newton_increment(model, x, y, u)
        if np.linalg.norm(delta) <= 1e-12 * (1.0 + np.linalg.norm(x)):
            break
        step = 1.0
        for _ in range(max_backtracks + 1):
            candidate = model.normalize(x + step * delta)
            candidate_cost = _weighted_cost(model, candidate, y, u)
            if candidate_cost <= cost:
                break
            step *= damping
        else:
            logger.error(f"WNLS residual increased at every damping level (iteration {iteration})")
            raise NonConvergence("WNLS residual increased for every damped step")
        x, cost = candidate, candidate_cost
    return x


def estimator_predict(kind: EstimatorKind, model, belief, u, params: UkfParams) -> GaussianBelief:
    """Prediction half for any estimator kind; point estimators carry their covariance unchanged."""
    if kind is EstimatorKind.KF:
        return kf_predict(model, belief, u)
    if kind is EstimatorKind.EKF:
        return ekf_predict(model, belief, u)
    if kind is EstimatorKind.UKF:
        return ukf_predict(model, belief, u, params)
    return GaussianBelief(model.step(belief.mean, u), belief.cov)


def estimator_update(kind: EstimatorKind, model, predicted, u, y, params: UkfParams, wnls_options=None):
    """Measurement half for any estimator kind."""
    if kind is EstimatorKind.KF:
        return kf_update(model, predicted, u, y)
    if kind is EstimatorKind.EKF:
        return ekf_update(model, predicted, u, y)
    if kind is EstimatorKind.UKF:
        return ukf_update(model, predicted, u, y, params)
    if kind is EstimatorKind.WLS:
        return GaussianBelief(wls_step(model, predicted.mean, y, u), predicted.cov)
    if kind is EstimatorKind.WNLS:
        options = wnls_options or {}
        return GaussianBelief(wnls_step(model, predicted.mean, y, u, **options), predicted.cov)
    return predicted
