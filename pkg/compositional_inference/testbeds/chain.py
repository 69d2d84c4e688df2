"""
Mass-spring-damper chains, monolithic and partitioned into subsystems.

Spring/damper element ``i`` connects mass ``i-1`` to mass ``i``; element 0
ties mass 0 to the ground and the last mass is free on its right, so

    M ẍ + C ẋ + K x = f(t)

with tridiagonal K and C. A subsystem owns a contiguous run of masses and
keeps the state [x_local, v_local, p], where ``p`` holds its unknown
parameters divided by their reference values. Its input vector is the net
external force on each local mass (interface messages plus forcing).
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from compositional_inference.estimators import EstimatorKind, UkfParams
from compositional_inference.exceptions import InvalidParams, LengthMismatch
from compositional_inference.graph import InterfaceEdge, MessageMode, SubsystemNode, SystemGraph, build_graph
from compositional_inference.interface_laws import LearnedEdgeLaw, LearnedLaw, SpringDamperLaw
from compositional_inference.models import (
    GaussianBelief,
    IntegratorKind,
    StateSpaceModel,
    augment_belief,
    heun_corrector,
    heun_predictor,
)

logger = logging.getLogger(__name__)

PARAM_KINDS = ("m", "k", "c")
MONOLITHIC = "monolithic"


@dataclass(frozen=True)
class UnknownParam:
    """
    A chain parameter estimated as a random-walk state.

    ``initial`` is the prior guess in physical units, ``variance`` the prior
    variance of the normalised value. ``reference`` defaults to the true value.
    """

    kind: str
    index: int
    initial: float
    variance: float = 0.04
    reference: Optional[float] = None

    def __post_init__(self):
        if self.kind not in PARAM_KINDS:
            raise InvalidParams(f"Unknown parameter kind '{self.kind}', expected one of {PARAM_KINDS}")
        if self.variance <= 0:
            raise InvalidParams(f"Prior variance of {self.label} must be positive, got {self.variance}")
        if self.reference is not None and self.reference <= 0:
            raise InvalidParams(f"Reference scale of {self.label} must be positive, got {self.reference}")

    @property
    def label(self) -> str:
        return f"{self.kind}{self.index + 1}"


@dataclass(frozen=True)
class ChainParams:
    masses: np.ndarray
    stiffness: np.ndarray
    damping: np.ndarray
    forcing: Optional[Callable[[float], np.ndarray]] = field(default=None, compare=False)
    unknown: Tuple[UnknownParam, ...] = ()

    def __post_init__(self):
        m = np.array(self.masses, dtype=float).reshape(-1)
        k = np.array(self.stiffness, dtype=float).reshape(-1)
        c = np.array(self.damping, dtype=float).reshape(-1)
        if not m.shape == k.shape == c.shape:
            raise InvalidParams(f"masses, stiffness and damping lengths differ: {m.size}, {k.size}, {c.size}")
        if m.size < 2:
            raise InvalidParams(f"A chain needs at least 2 degrees of freedom, got {m.size}")
        if np.any(m <= 0):
            raise InvalidParams("Masses must be positive")
        if np.any(k < 0) or np.any(c < 0):
            raise InvalidParams("Stiffness and damping values must be non-negative")
        seen = set()
        for spec in self.unknown:
            if not 0 <= spec.index < m.size:
                raise InvalidParams(f"Unknown parameter {spec.label} outside a {m.size}-DOF chain")
            if (spec.kind, spec.index) in seen:
                raise InvalidParams(f"Parameter {spec.label} listed twice")
            seen.add((spec.kind, spec.index))
        object.__setattr__(self, "masses", m)
        object.__setattr__(self, "stiffness", k)
        object.__setattr__(self, "damping", c)
        object.__setattr__(self, "unknown", tuple(self.unknown))

    @classmethod
    def uniform(cls, n_dof: int, mass: float, stiffness: float, damping: float, **kwargs) -> "ChainParams":
        return cls(np.full(n_dof, mass), np.full(n_dof, stiffness), np.full(n_dof, damping), **kwargs)

    @property
    def n_dof(self) -> int:
        return self.masses.shape[0]

    def true_value(self, spec: UnknownParam) -> float:
        return float({"m": self.masses, "k": self.stiffness, "c": self.damping}[spec.kind][spec.index])

    def reference(self, spec: UnknownParam) -> float:
        return spec.reference if spec.reference is not None else self.true_value(spec)

    def force_at(self, t: float) -> np.ndarray:
        if self.forcing is None:
            return np.zeros(self.n_dof)
        f = np.asarray(self.forcing(t), dtype=float).reshape(-1)
        if f.shape[0] != self.n_dof:
            raise LengthMismatch(f"Forcing returned {f.shape[0]} values for a {self.n_dof}-DOF chain")
        return f

    def mass_matrix(self) -> np.ndarray:
        return np.diag(self.masses)

    def stiffness_matrix(self) -> np.ndarray:
        return _tridiagonal(self.stiffness)

    def damping_matrix(self) -> np.ndarray:
        return _tridiagonal(self.damping)


def _tridiagonal(values: np.ndarray) -> np.ndarray:
    right = np.append(values[1:], 0.0)
    matrix = np.diag(values + right)
    matrix -= np.diag(values[1:], 1) + np.diag(values[1:], -1)
    return matrix


def segment_forces(lo: int, k: np.ndarray, c: np.ndarray, x: np.ndarray, v: np.ndarray, u: np.ndarray) -> np.ndarray:
    """
    Net force on each mass of the contiguous segment starting at DOF ``lo``.

    Only elements with both ends inside the segment (and the ground element
    when the segment starts at DOF 0) contribute; everything else arrives
    through ``u``.
    """
    force = np.array(u, dtype=float, copy=True)
    n_loc = x.shape[0]
    if n_loc > 1:
        springs = slice(lo + 1, lo + n_loc)
        f = k[springs] * (x[1:] - x[:-1]) + c[springs] * (v[1:] - v[:-1])
        force[:-1] += f
        force[1:] -= f
    if lo == 0:
        force[0] -= k[0] * x[0] + c[0] * v[0]
    return force


class _SegmentDynamics:
    """Derivative and acceleration maps of one segment with its unknowns as states."""

    def __init__(self, params: ChainParams, dofs: Sequence[int], unknown: Sequence[UnknownParam], measured: Sequence[int]):
        self.params = params
        self.lo = dofs[0]
        self.n_loc = len(dofs)
        self.unknown = tuple(unknown)
        self.references = np.array([params.reference(spec) for spec in self.unknown])
        self.measured_local = [dof - self.lo for dof in measured]

    def resolve(self, z: np.ndarray):
        m, k, c = self.params.masses, self.params.stiffness, self.params.damping
        if not self.unknown:
            return m, k, c
        m, k, c = m.copy(), k.copy(), c.copy()
        values = {"m": m, "k": k, "c": c}
        offset = 2 * self.n_loc
        for j, spec in enumerate(self.unknown):
            values[spec.kind][spec.index] = z[offset + j] * self.references[j]
        return m, k, c

    def acceleration(self, z, u) -> np.ndarray:
        m, k, c = self.resolve(z)
        n = self.n_loc
        force = segment_forces(self.lo, k, c, z[:n], z[n:2 * n], u)
        return force / m[self.lo:self.lo + n]

    def derivative(self, z, u) -> np.ndarray:
        n = self.n_loc
        return np.concatenate([z[n:2 * n], self.acceleration(z, u), np.zeros(len(self.unknown))])

    def measurement(self, z, u) -> np.ndarray:
        return self.acceleration(z, u)[self.measured_local]


@dataclass(frozen=True)
class ChainSubsystem:
    name: str
    dofs: Tuple[int, ...]
    model: StateSpaceModel
    unknown: Tuple[UnknownParam, ...]
    measured: Tuple[int, ...]

    @property
    def n_local(self) -> int:
        return len(self.dofs)

    def x_index(self, dof: int) -> int:
        return dof - self.dofs[0]

    def v_index(self, dof: int) -> int:
        return self.n_local + dof - self.dofs[0]

    def param_index(self, kind: str, index: int) -> int:
        for j, spec in enumerate(self.unknown):
            if (spec.kind, spec.index) == (kind, index):
                return 2 * self.n_local + j
        raise InvalidParams(f"Subsystem '{self.name}' does not estimate {kind}{index + 1}")

    def interface_selector(self, dof: int) -> Tuple[int, int]:
        return (self.x_index(dof), self.v_index(dof))


@dataclass(frozen=True)
class ChainSystem:
    """Monolithic model, partitioned subsystems and their default interface edges."""

    params: ChainParams
    monolithic: StateSpaceModel
    subsystems: Tuple[ChainSubsystem, ...]
    edges: Tuple[InterfaceEdge, ...]
    measured: Tuple[int, ...]
    dt: float

    def subsystem(self, name: str) -> ChainSubsystem:
        for sub in self.subsystems:
            if sub.name == name:
                return sub
        raise InvalidParams(f"No subsystem named '{name}'")

    def owner(self, dof: int) -> ChainSubsystem:
        for sub in self.subsystems:
            if dof in sub.dofs:
                return sub
        raise InvalidParams(f"DOF {dof} belongs to no subsystem")

    def monolithic_param_index(self, kind: str, index: int) -> int:
        for j, spec in enumerate(self.params.unknown):
            if (spec.kind, spec.index) == (kind, index):
                return 2 * self.params.n_dof + j
        raise InvalidParams(f"The monolithic model does not estimate {kind}{index + 1}")

    @property
    def interface_springs(self) -> Tuple[int, ...]:
        return tuple(sub.dofs[0] for sub in self.subsystems[1:])

    def interface_edges(
        self, mode: MessageMode = MessageMode.DETERMINISTIC, learned: Optional[Mapping[int, LearnedLaw]] = None
    ) -> Tuple[InterfaceEdge, ...]:
        """
        Two directed edges per interface spring ``b`` between masses ``b-1``
        and ``b``. Learned laws are keyed by spring index and were fitted on
        Δ = state(b-1) − state(b).
        """
        edges = []
        for left, right in zip(self.subsystems[:-1], self.subsystems[1:]):
            b = right.dofs[0]
            a = b - 1
            k, c = float(self.params.stiffness[b]), float(self.params.damping[b])
            if learned is not None and b in learned:
                forward, backward = LearnedEdgeLaw(learned[b], 1.0, False), LearnedEdgeLaw(learned[b], -1.0, True)
            elif mode is MessageMode.LEARNED:
                raise InvalidParams(f"Learned mode needs a learned law for interface spring k{b + 1}")
            else:
                forward = backward = SpringDamperLaw(k, c)
            edges.append(InterfaceEdge(
                sender=left.name,
                receiver=right.name,
                law=forward,
                sender_selector=left.interface_selector(a),
                receiver_selector=right.interface_selector(b),
                target_indices=(right.x_index(b),),
                mode=mode,
                noise_state_index=right.v_index(b),
                receiver_mass=float(self.params.masses[b]),
                label=f"k{b + 1}",
            ))
            edges.append(InterfaceEdge(
                sender=right.name,
                receiver=left.name,
                law=backward,
                sender_selector=right.interface_selector(b),
                receiver_selector=left.interface_selector(a),
                target_indices=(left.x_index(a),),
                mode=mode,
                noise_state_index=left.v_index(a),
                receiver_mass=float(self.params.masses[a]),
                label=f"k{b + 1}",
            ))
        return tuple(edges)

    def channels(self, measurements: Mapping[int, np.ndarray]) -> Dict[str, np.ndarray]:
        """Per-subsystem observation series (and the monolithic one) from per-DOF records."""
        out = {}
        for sub in self.subsystems:
            if sub.measured:
                out[sub.name] = np.column_stack([measurements[dof] for dof in sub.measured])
        if self.measured:
            out[MONOLITHIC] = np.column_stack([measurements[dof] for dof in self.measured])
        return out

    def input_channels(self, truth: "ChainTruth") -> Dict[str, np.ndarray]:
        if self.params.forcing is None:
            return {}
        out = {sub.name: truth.forcing[:, list(sub.dofs)] for sub in self.subsystems}
        out[MONOLITHIC] = truth.forcing
        return out


def _make_model(params, dofs, unknown, measured, variances, dt, integrator, q_scale, name) -> StateSpaceModel:
    dynamics = _SegmentDynamics(params, dofs, unknown, measured)
    dim = 2 * len(dofs) + len(unknown)
    return StateSpaceModel(
        state_dim=dim,
        input_dim=len(dofs),
        transition=dynamics.derivative,
        measurement=dynamics.measurement,
        q=q_scale * np.eye(dim),
        r=np.diag([variances[dof] for dof in measured]) if measured else np.zeros((0, 0)),
        dt=dt,
        continuous=True,
        integrator=integrator,
        name=name,
    )


def _default_groups(n_dof: int) -> Tuple[Tuple[int, ...], ...]:
    return tuple(tuple(range(lo, min(lo + 2, n_dof))) for lo in range(0, n_dof, 2))


def build_chain(
    params: ChainParams,
    groups: Optional[Sequence[Sequence[int]]] = None,
    measured: Optional[Mapping[int, float]] = None,
    dt: float = 1e-3,
    integrator: IntegratorKind = IntegratorKind.HEUN,
    q_scale: float = 1e-8,
    names: Optional[Sequence[str]] = None,
) -> ChainSystem:
    """
    Assemble the monolithic chain model and its partition into subsystems.

    Args:
        params: Physical parameters and the unknowns to estimate
        groups: Contiguous DOF runs, one per subsystem (default: pairs)
        measured: Acceleration noise variance per measured DOF
        dt: Model time step in seconds
        integrator: Discretisation of every model
        q_scale: Process noise added to every state per step
        names: Subsystem ids (default S1, S2, ...)

    Returns:
        ChainSystem with deterministic spring-damper interface edges

    Raises:
        InvalidParams: If groups are not a contiguous ordered cover, or an
            unknown parameter sits on an interface element
    """
    n = params.n_dof
    groups = tuple(tuple(int(d) for d in g) for g in (groups or _default_groups(n)))
    flat = [d for g in groups for d in g]
    if flat != list(range(n)) or any(len(g) == 0 for g in groups):
        logger.error(f"Invalid chain partition {groups} for {n} DOFs")
        raise InvalidParams(f"Groups {groups} must split DOFs 0..{n - 1} into ordered contiguous runs")
    names = tuple(names) if names is not None else tuple(f"S{i + 1}" for i in range(len(groups)))
    if len(names) != len(groups) or len(set(names)) != len(names):
        raise InvalidParams(f"Need {len(groups)} distinct subsystem names, got {names}")
    measured = dict(measured or {})
    for dof, variance in measured.items():
        if not 0 <= dof < n:
            raise InvalidParams(f"Measured DOF {dof} outside a {n}-DOF chain")
        if variance <= 0:
            raise InvalidParams(f"Measurement variance for DOF {dof} must be positive, got {variance}")
    measured_dofs = tuple(sorted(measured))

    interface = {g[0] for g in groups[1:]}
    for spec in params.unknown:
        if spec.kind != "m" and spec.index in interface:
            logger.error(f"Unknown interface element {spec.label}")
            raise InvalidParams(f"Interface element {spec.label} must be known to build coupling messages")

    subsystems = []
    for name, dofs in zip(names, groups):
        local_unknown = tuple(spec for spec in params.unknown if spec.index in dofs)
        local_measured = tuple(dof for dof in measured_dofs if dof in dofs)
        model = _make_model(params, dofs, local_unknown, local_measured, measured, dt, integrator, q_scale, name)
        subsystems.append(ChainSubsystem(name, dofs, model, local_unknown, local_measured))

    monolithic = _make_model(
        params, tuple(range(n)), params.unknown, measured_dofs, measured, dt, integrator, q_scale, MONOLITHIC
    )
    system = ChainSystem(params, monolithic, tuple(subsystems), (), measured_dofs, dt)
    system = replace(system, edges=system.interface_edges())
    logger.debug(f"Built {n}-DOF chain with {len(groups)} subsystems and {len(system.edges)} edges")
    return system


def _state_belief(x0, v0, dofs, state_var: float) -> GaussianBelief:
    idx = list(dofs)
    mean = np.concatenate([np.asarray(x0, dtype=float)[idx], np.asarray(v0, dtype=float)[idx]])
    return GaussianBelief(mean, state_var * np.eye(mean.shape[0]))


def _param_prior(params: ChainParams, unknown: Iterable[UnknownParam]):
    unknown = tuple(unknown)
    means = [spec.initial / params.reference(spec) for spec in unknown]
    variances = [spec.variance for spec in unknown]
    return means, variances


def initial_belief(system: ChainSystem, x0, v0, state_var: float = 1e-6, subsystem: Optional[str] = None) -> GaussianBelief:
    """Prior over the monolithic (or one subsystem's) augmented state."""
    if subsystem is None:
        dofs, unknown = range(system.params.n_dof), system.params.unknown
    else:
        sub = system.subsystem(subsystem)
        dofs, unknown = sub.dofs, sub.unknown
    means, variances = _param_prior(system.params, unknown)
    return augment_belief(_state_belief(x0, v0, dofs, state_var), means, variances)


def chain_graph(
    system: ChainSystem,
    x0,
    v0,
    estimator: EstimatorKind = EstimatorKind.UKF,
    mode: MessageMode = MessageMode.DETERMINISTIC,
    state_var: float = 1e-6,
    ukf_params: UkfParams = UkfParams(),
    learned: Optional[Mapping[int, LearnedLaw]] = None,
    include: Optional[Sequence[str]] = None,
) -> SystemGraph:
    """
    Distributed graph over the chain's subsystems.

    ``include`` restricts the graph to the named subsystems and the edges
    among them, which is how inner graphs for hierarchical embedding are made.
    """
    chosen = set(include) if include is not None else {sub.name for sub in system.subsystems}
    forced = system.params.forcing is not None
    nodes = []
    for sub in system.subsystems:
        if sub.name not in chosen:
            continue
        selector = tuple(i for dof in (sub.dofs[0], sub.dofs[-1]) for i in sub.interface_selector(dof))
        nodes.append(SubsystemNode(
            node_id=sub.name,
            model=sub.model,
            estimator=estimator,
            belief=initial_belief(system, x0, v0, state_var, sub.name),
            interface_selector=tuple(dict.fromkeys(selector)),
            measurement_source=sub.name if sub.measured else None,
            input_source=sub.name if forced else None,
            ukf_params=ukf_params,
        ))
    edges = [
        edge for edge in system.interface_edges(mode, learned)
        if edge.sender in chosen and edge.receiver in chosen
    ]
    return build_graph(nodes, edges)


def monolithic_graph(
    system: ChainSystem,
    x0,
    v0,
    estimator: EstimatorKind = EstimatorKind.UKF,
    state_var: float = 1e-6,
    ukf_params: UkfParams = UkfParams(),
) -> SystemGraph:
    """Single-node graph running the centralised estimator on the full augmented state."""
    node = SubsystemNode(
        node_id=MONOLITHIC,
        model=system.monolithic,
        estimator=estimator,
        belief=initial_belief(system, x0, v0, state_var),
        measurement_source=MONOLITHIC if system.measured else None,
        input_source=MONOLITHIC if system.params.forcing is not None else None,
        ukf_params=ukf_params,
    )
    return build_graph([node], [])


@dataclass(frozen=True)
class ChainTruth:
    """Heun-integrated reference trajectories, one row per time t_n = n·dt."""

    times: np.ndarray
    displacement: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    forcing: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.times.shape[0] - 1

    def interface_force(self, params: ChainParams, spring: int) -> np.ndarray:
        """Force of element ``spring`` on mass ``spring``: k(x_a − x_b) + c(v_a − v_b), a = spring − 1."""
        if not 1 <= spring < params.n_dof:
            raise InvalidParams(f"Element {spring} is not an internal spring")
        a, b = spring - 1, spring
        return (
            params.stiffness[spring] * (self.displacement[:, a] - self.displacement[:, b])
            + params.damping[spring] * (self.velocity[:, a] - self.velocity[:, b])
        )


def simulate_truth(
    params: ChainParams,
    x0,
    v0,
    horizon: float,
    dt: float,
    measured: Optional[Mapping[int, float]] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[ChainTruth, Dict[int, np.ndarray]]:
    """
    Integrate the monolithic chain with Heun and synthesise accelerometer data.

    Forcing is sampled at every t_n; the Heun corrector uses the forcing at
    the end of the step.

    Args:
        params: True chain parameters
        x0: Initial displacements
        v0: Initial velocities
        horizon: Simulated time in seconds
        dt: Step in seconds
        measured: Noise variance per measured DOF
        rng: Generator for the measurement noise (required when noise is requested)

    Returns:
        Tuple (truth, {dof: noisy acceleration at t_1 .. t_N})
    """
    if horizon <= 0 or dt <= 0:
        raise InvalidParams(f"horizon and dt must be positive, got {horizon}, {dt}")
    n = params.n_dof
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    v0 = np.asarray(v0, dtype=float).reshape(-1)
    if x0.shape != (n,) or v0.shape != (n,):
        raise LengthMismatch(f"Initial conditions must have {n} entries")
    n_steps = int(round(horizon / dt))
    times = np.arange(n_steps + 1) * dt
    forcing = np.vstack([params.force_at(t) for t in times])
    dynamics = _SegmentDynamics(params, tuple(range(n)), (), ())

    states = np.empty((n_steps + 1, 2 * n))
    states[0] = np.concatenate([x0, v0])
    for step in range(n_steps):
        z = states[step]
        z_pred, f0 = heun_predictor(dynamics.derivative, z, forcing[step], dt)
        states[step + 1] = heun_corrector(dynamics.derivative, z, f0, z_pred, forcing[step + 1], dt)
    accel = np.vstack([dynamics.acceleration(states[i], forcing[i]) for i in range(n_steps + 1)])
    truth = ChainTruth(times, states[:, :n], states[:, n:], accel, forcing)

    records = {}
    measured = measured or {}
    if measured and rng is None:
        raise InvalidParams("An rng is required to synthesise noisy measurements")
    for dof in sorted(measured):
        noise = rng.normal(0.0, np.sqrt(measured[dof]), n_steps)
        records[dof] = accel[1:, dof] + noise
    logger.debug(f"Simulated {n}-DOF chain for {n_steps} steps")
    return truth, records
