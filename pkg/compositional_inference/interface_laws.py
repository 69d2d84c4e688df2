"""
Edge laws that turn interface states into coupling messages.

Every law exposes the same surface so the schedules never distinguish
analytic from learned couplings:

    law.sender_dim, law.receiver_dim      selector arities
    law.evaluate(s_sender, s_receiver)    message mean (1-D array)
    law.variance(s_sender, s_receiver, p_sender, p_receiver)
                                          message variance (probabilistic mode)
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Hashable, Union

import numpy as np

from compositional_inference.exceptions import IndexOutOfRange, InvalidParams, NonFinite

logger = logging.getLogger(__name__)

LIBRARY_COLUMNS = ("dx", "dv", "dx^3", "|dv|dv", "dx*dv", "1")


def eval_spring_damper(law: "SpringDamperLaw", s_sender, s_receiver) -> float:
    """
    Linear spring-damper force sign·(k·Δx + c·Δẋ), with Δ = sender − receiver.

    Args:
        law: Spring-damper parameters
        s_sender: Sender interface state [x, ẋ]
        s_receiver: Receiver interface state [x, ẋ]

    Returns:
        Force in N acting on the receiver
    """
    delta = np.asarray(s_sender, dtype=float) - np.asarray(s_receiver, dtype=float)
    return float(law.sign * (law.k * delta[0] + law.c * delta[1]))


def interface_force_variance(p_s1, p_s2, k: float, c: float) -> float:
    """
    Variance of a linear interface force, [k c]·(P_s1 + P_s2)·[k c]ᵀ.

    Cross-covariances between the two interface estimates are neglected. A
    negative result (PSD violation at round-off level) is clamped to zero.
    """
    a = np.array([k, c], dtype=float)
    total = np.asarray(p_s1, dtype=float) + np.asarray(p_s2, dtype=float)
    value = float(a @ total @ a)
    if value < 0.0:
        logger.warning(f"Negative interface force variance {value:.3e} clamped to 0")
        return 0.0
    return value


@dataclass
class VarianceTracker:
    """Last reported interface variance per edge, initially zero."""

    last: Dict[Hashable, float] = field(default_factory=dict)

    def reset(self):
        self.last.clear()


def incremental_variance(tracker: VarianceTracker, edge: Hashable, current_var: float) -> float:
    """Return max(0, current − last) and remember ``current_var`` for ``edge``."""
    if current_var < 0:
        raise InvalidParams(f"Variance must be non-negative, got {current_var}")
    previous = tracker.last.get(edge, 0.0)
    tracker.last[edge] = float(current_var)
    return max(0.0, float(current_var) - previous)


def inject_process_noise(q, var_used: float, dt: float, mass: float, target_index: int) -> np.ndarray:
    """
    Add (dt/mass)²·var_used to the diagonal entry ``target_index`` of ``q``.

    Returns:
        A new matrix; every other entry is copied unchanged

    Raises:
        IndexOutOfRange: If ``target_index`` is outside ``q``
    """
    q_new = np.array(q, dtype=float, copy=True)
    if not 0 <= target_index < q_new.shape[0]:
        logger.error(f"Noise target index {target_index} outside {q_new.shape[0]}-state model")
        raise IndexOutOfRange(f"Target index {target_index} out of range for q of size {q_new.shape[0]}")
    if mass <= 0 or dt <= 0:
        raise InvalidParams(f"mass and dt must be positive, got mass={mass}, dt={dt}")
    if var_used:
        q_new[target_index, target_index] += (dt / mass) ** 2 * var_used
    return q_new


@dataclass(frozen=True)
class SpringDamperLaw:
    k: float
    c: float
    sign: float = 1.0

    sender_dim = 2
    receiver_dim = 2

    def __post_init__(self):
        if self.k < 0 or self.c < 0:
            raise InvalidParams(f"Spring-damper needs k, c >= 0, got k={self.k}, c={self.c}")
        if self.sign not in (1.0, -1.0):
            raise InvalidParams(f"sign must be +1 or -1, got {self.sign}")

    def evaluate(self, s_sender, s_receiver) -> np.ndarray:
        return np.array([eval_spring_damper(self, s_sender, s_receiver)])

    def variance(self, s_sender, s_receiver, p_sender, p_receiver) -> float:
        return interface_force_variance(p_sender, p_receiver, self.k, self.c)

    def to_dict(self) -> Dict[str, Any]:
        return {"type": "spring_damper", "k": self.k, "c": self.c, "sign": self.sign}


@dataclass(frozen=True)
class LearnedLaw:
    """Sparse-regression surrogate over the six-column interface library."""

    coefficients: np.ndarray

    def __post_init__(self):
        xi = np.asarray(self.coefficients, dtype=float).reshape(-1)
        if xi.shape != (len(LIBRARY_COLUMNS),):
            raise InvalidParams(f"Learned law needs {len(LIBRARY_COLUMNS)} coefficients, got {xi.shape[0]}")
        if not np.all(np.isfinite(xi)):
            raise NonFinite("Learned law coefficients must be finite")
        object.__setattr__(self, "coefficients", xi)

    @property
    def stiffness(self) -> float:
        return float(self.coefficients[0])

    @property
    def damping(self) -> float:
        return float(self.coefficients[1])

    def gradient(self, dx: float, dv: float) -> np.ndarray:
        """[∂F/∂Δx, ∂F/∂Δv] at (dx, dv)."""
        xi = self.coefficients
        return np.array([
            xi[0] + 3.0 * xi[2] * dx ** 2 + xi[4] * dv,
            xi[1] + 2.0 * xi[3] * abs(dv) + xi[4] * dx,
        ])

    def save(self, path: Union[str, Path]):
        lines = [f"{value!r}" for value in self.coefficients.tolist()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "LearnedLaw":
        text = Path(path).read_text(encoding="utf-8")
        values = [float(token) for token in text.split()]
        return cls(np.array(values))

    def to_dict(self) -> Dict[str, Any]:
        return dict(zip(LIBRARY_COLUMNS, self.coefficients.tolist()))


def eval_learned_law(law: LearnedLaw, dx, dv):
    """
    Library-weighted force ξ·[Δx, Δv, Δx³, |Δv|Δv, ΔxΔv, 1].

    Scalars give a float, arrays give an array of forces.
    """
    dx = np.asarray(dx, dtype=float)
    dv = np.asarray(dv, dtype=float)
    xi = law.coefficients
    force = xi[0] * dx + xi[1] * dv + xi[2] * dx ** 3 + xi[3] * np.abs(dv) * dv + xi[4] * dx * dv + xi[5]
    return float(force) if force.ndim == 0 else force


@dataclass(frozen=True)
class LearnedEdgeLaw:
    """
    Learned law oriented on an edge.

    The law was fitted on Δ = s_a − s_b for a fixed pair (a, b). On the edge
    a→b use ``swap=False, sign=+1``; on b→a use ``swap=True, sign=-1`` so the
    receiver gets the reaction force.
    """

    law: LearnedLaw
    sign: float = 1.0
    swap: bool = False

    sender_dim = 2
    receiver_dim = 2

    def _delta(self, s_sender, s_receiver) -> np.ndarray:
        s = np.asarray(s_sender, dtype=float)
        r = np.asarray(s_receiver, dtype=float)
        return r - s if self.swap else s - r

    def evaluate(self, s_sender, s_receiver) -> np.ndarray:
        delta = self._delta(s_sender, s_receiver)
        return np.array([self.sign * eval_learned_law(self.law, delta[0], delta[1])])

    def variance(self, s_sender, s_receiver, p_sender, p_receiver) -> float:
        # Linearised about the current interface means.
        delta = self._delta(s_sender, s_receiver)
        grad = self.law.gradient(delta[0], delta[1])
        return interface_force_variance(p_sender, p_receiver, grad[0], grad[1])

    def to_dict(self) -> Dict[str, Any]:
        return {"type": "learned", "sign": self.sign, "swap": self.swap, "coefficients": self.law.to_dict()}


@dataclass(frozen=True)
class PhaseRelayLaw:
    """Forward the sender's boundary phase angles; the receiver evaluates the coupling."""

    size: int
    receiver_dim = 0

    @property
    def sender_dim(self) -> int:
        return self.size

    def evaluate(self, s_sender, s_receiver) -> np.ndarray:
        return np.array(s_sender, dtype=float, copy=True)

    def variance(self, s_sender, s_receiver, p_sender, p_receiver) -> float:
        raise NotImplementedError("Phase relay messages carry means only")

    def to_dict(self) -> Dict[str, Any]:
        return {"type": "phase_relay", "size": self.size}
