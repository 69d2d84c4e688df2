"""
State-space abstractions shared by estimators and schedules.

A ``StateSpaceModel`` is either discrete (``transition`` returns the next
state) or continuous (``transition`` returns the state derivative, and the
model discretises itself with ``integrate_step`` at its own ``dt``). Estimators
only ever call ``StateSpaceModel.step``.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from compositional_inference.exceptions import InvalidParams, NonFinite
from compositional_inference.numerics import as_matrix, is_symmetric, symmetrize

logger = logging.getLogger(__name__)

COV_SYMMETRY_TOL = 1e-10

Vector = np.ndarray
DerivativeMap = Callable[[np.ndarray, np.ndarray], np.ndarray]


class IntegratorKind(Enum):
    EULER = "euler"
    HEUN = "heun"
    AB2 = "ab2"


@dataclass(frozen=True)
class GaussianBelief:
    """Mean and covariance of a (possibly augmented) subsystem state."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = as_matrix(self.cov, "belief covariance")
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError(
                f"Covariance shape {cov.shape} does not match mean length {mean.shape[0]}"
            )
        if not np.all(np.isfinite(mean)):
            raise NonFinite("Belief mean contains non-finite entries")
        if not is_symmetric(cov, COV_SYMMETRY_TOL):
            logger.error(f"Rejected asymmetric covariance of shape {cov.shape}")
            raise ValueError("Belief covariance is not symmetric within tolerance")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", symmetrize(cov))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def marginal(self, indices: Sequence[int]) -> "GaussianBelief":
        idx = list(indices)
        return GaussianBelief(self.mean[idx], self.cov[np.ix_(idx, idx)])

    def to_dict(self) -> Dict[str, Any]:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist()}

    def __repr__(self):
        return f"GaussianBelief(dim={self.dim}, mean={np.array2string(self.mean, precision=4)})"


def _check_finite(value: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        logger.error(f"{what} returned non-finite values")
        raise NonFinite(f"{what} returned non-finite values")
    return value


def heun_predictor(f: DerivativeMap, x: np.ndarray, u: np.ndarray, dt: float):
    """Euler predictor stage of Heun's method, returns (predicted state, f(x))."""
    f0 = _check_finite(np.asarray(f(x, u), dtype=float), "Derivative map")
    return x + dt * f0, f0


def heun_corrector(
    f: DerivativeMap, x: np.ndarray, f0: np.ndarray, x_pred: np.ndarray, u: np.ndarray, dt: float
) -> np.ndarray:
    """Trapezoidal corrector stage of Heun's method."""
    f1 = _check_finite(np.asarray(f(x_pred, u), dtype=float), "Derivative map")
    return x + 0.5 * dt * (f0 + f1)


def integrate_step(
    kind: IntegratorKind,
    f: DerivativeMap,
    x,
    u,
    dt: float,
    prev_f: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Advance ``x`` by one step of the chosen explicit integrator.

    Args:
        kind: Integrator family
        f: Derivative map ``f(x, u)``
        x: Current state
        u: Input held constant over the step
        dt: Step length in seconds
        prev_f: Derivative from the previous step (AB2 only); without it AB2
            bootstraps with Heun

    Returns:
        Tuple of (next state, f evaluated at ``x``)

    Raises:
        NonFinite: If the derivative map produces NaN or Inf
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)

    if kind is IntegratorKind.EULER:
        x_next, f0 = heun_predictor(f, x, u, dt)
        return x_next, f0
    if kind is IntegratorKind.AB2 and prev_f is not None:
        f0 = _check_finite(np.asarray(f(x, u), dtype=float), "Derivative map")
        return x + dt * (1.5 * f0 - 0.5 * np.asarray(prev_f, dtype=float)), f0

    x_pred, f0 = heun_predictor(f, x, u, dt)
    return heun_corrector(f, x, f0, x_pred, u, dt), f0


def _check_noise_matrix(m: np.ndarray, dim: int, name: str):
    if m.shape != (dim, dim):
        raise InvalidParams(f"{name} must be {dim}x{dim}, got {m.shape}")
    if not is_symmetric(m, COV_SYMMETRY_TOL):
        raise InvalidParams(f"{name} must be symmetric")
    if dim and float(np.linalg.eigvalsh(symmetrize(m))[0]) < -1e-12 * max(1.0, float(np.max(np.abs(m)))):
        raise InvalidParams(f"{name} must be positive semidefinite")


@dataclass(frozen=True)
class StateSpaceModel:
    """
    Local model of one subsystem.

    ``transition(x, u)`` is the one-step map for discrete models and the state
    derivative for continuous ones. ``measurement(x, u)`` predicts the
    observation; it receives the input because accelerations depend on the
    interface forces acting on a subsystem.

    Linear models additionally carry ``transition_matrix`` (M),
    ``input_matrix`` (B) and ``measurement_matrix`` (H). ``transition_jacobian``
    is the Jacobian of the one-step map returned by ``step``.
    """

    state_dim: int
    input_dim: int
    transition: DerivativeMap
    measurement: DerivativeMap
    q: np.ndarray
    r: np.ndarray
    dt: float
    continuous: bool = False
    integrator: IntegratorKind = IntegratorKind.EULER
    transition_matrix: Optional[np.ndarray] = None
    input_matrix: Optional[np.ndarray] = None
    measurement_matrix: Optional[np.ndarray] = None
    transition_jacobian: Optional[DerivativeMap] = None
    measurement_jacobian: Optional[DerivativeMap] = None
    measurement_residual: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    state_normalizer: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = field(default="model", compare=False)

    def __post_init__(self):
        if self.state_dim < 1:
            raise InvalidParams(f"state_dim must be positive, got {self.state_dim}")
        if self.dt <= 0:
            raise InvalidParams(f"dt must be positive, got {self.dt}")
        q = as_matrix(self.q, "q")
        r = as_matrix(self.r, "r")
        _check_noise_matrix(q, self.state_dim, "q")
        _check_noise_matrix(r, r.shape[0], "r")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)

    @property
    def obs_dim(self) -> int:
        return self.r.shape[0]

    @property
    def is_linear(self) -> bool:
        return self.transition_matrix is not None and self.measurement_matrix is not None

    def zero_input(self) -> np.ndarray:
        return np.zeros(self.input_dim)

    def input_vector(self, u) -> np.ndarray:
        if u is None:
            return self.zero_input()
        return np.asarray(u, dtype=float)

    def derivative(self, x, u=None) -> np.ndarray:
        if not self.continuous:
            raise NotImplementedError(f"Model '{self.name}' is discrete and has no derivative map")
        return np.asarray(self.transition(np.asarray(x, dtype=float), self.input_vector(u)), dtype=float)

    def step(self, x, u=None) -> np.ndarray:
        """One-step discrete transition, integrating continuous models at ``dt``."""
        x = np.asarray(x, dtype=float)
        u = self.input_vector(u)
        if not self.continuous:
            return _check_finite(np.asarray(self.transition(x, u), dtype=float), "Transition")
        if self.integrator is IntegratorKind.AB2:
            raise NotImplementedError("AB2 needs derivative memory; use the AB2 schedule instead")
        x_next, _ = integrate_step(self.integrator, self.transition, x, u, self.dt)
        return x_next

    def observe(self, x, u=None) -> np.ndarray:
        y = np.asarray(self.measurement(np.asarray(x, dtype=float), self.input_vector(u)), dtype=float)
        return _check_finite(y.reshape(-1), "Measurement")

    def residual(self, y, y_hat) -> np.ndarray:
        if self.measurement_residual is not None:
            return self.measurement_residual(np.asarray(y, dtype=float), np.asarray(y_hat, dtype=float))
        return np.asarray(y, dtype=float) - np.asarray(y_hat, dtype=float)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        if self.state_normalizer is None:
            return x
        return self.state_normalizer(x)

    def with_q(self, q) -> "StateSpaceModel":
        return replace(self, q=q)

    def with_transition(self, transition: DerivativeMap, continuous: bool) -> "StateSpaceModel":
        return replace(self, transition=transition, continuous=continuous, transition_jacobian=None)

    def __repr__(self):
        kind = "continuous" if self.continuous else "discrete"
        return (
            f"StateSpaceModel(name={self.name!r}, {kind}, state_dim={self.state_dim}, "
            f"input_dim={self.input_dim}, obs_dim={self.obs_dim}, dt={self.dt})"
        )


def linear_model(
    transition_matrix,
    measurement_matrix,
    q,
    r,
    dt: float = 1.0,
    input_matrix=None,
    name: str = "linear",
) -> StateSpaceModel:
    """
    Build a discrete linear-Gaussian model x' = M x + B u, y = H x.

    Analytic Jacobians are attached so EKF and KF coincide exactly.
    """
    m = as_matrix(transition_matrix, "transition matrix")
    h = as_matrix(measurement_matrix, "measurement matrix")
    n = m.shape[0]
    b = np.zeros((n, 0)) if input_matrix is None else as_matrix(input_matrix, "input matrix")
    if h.shape[1] != n or b.shape[0] != n:
        raise InvalidParams(f"Inconsistent linear model shapes M={m.shape}, H={h.shape}, B={b.shape}")

    def transition(x, u):
        return m @ x + (b @ u if b.shape[1] else 0.0)

    def measurement(x, u):
        return h @ x

    return StateSpaceModel(
        state_dim=n,
        input_dim=b.shape[1],
        transition=transition,
        measurement=measurement,
        q=q,
        r=r,
        dt=dt,
        transition_matrix=m,
        input_matrix=b,
        measurement_matrix=h,
        transition_jacobian=lambda x, u: m,
        measurement_jacobian=lambda x, u: h,
        name=name,
    )


def augment_belief(belief: GaussianBelief, param_means, param_vars) -> GaussianBelief:
    """
    Append parameters to a state belief as uncorrelated random-walk states.

    Args:
        belief: Belief over the dynamic state
        param_means: Prior means of the parameters
        param_vars: Prior variances, all strictly positive

    Returns:
        Block-diagonal augmented belief (the input itself when no parameters
        are given)
    """
    means = np.asarray(param_means, dtype=float).reshape(-1)
    variances = np.asarray(param_vars, dtype=float).reshape(-1)
    if means.shape != variances.shape:
        raise InvalidParams("param_means and param_vars must have equal length")
    if means.size == 0:
        return belief
    if np.any(variances <= 0):
        raise InvalidParams(f"Parameter variances must be positive, got {variances}")
    n, p = belief.dim, means.size
    cov = np.zeros((n + p, n + p))
    cov[:n, :n] = belief.cov
    cov[n:, n:] = np.diag(variances)
    return GaussianBelief(np.concatenate([belief.mean, means]), cov)
