"""
Kuramoto power-grid testbed built from a MATPOWER case.

Each bus i carries a phase θ_i, in the second-order (swing) form also a
frequency ω_i, with unit inertia:

    θ̇_i = ω_i
    ω̇_i = Ω_i − d_i ω_i + Σ_j K_ij sin(θ_j − θ_i)

The first-order form is θ̇_i = Ω_i + Σ_j K_ij sin(θ_j − θ_i). Estimators
augment the state with the natural frequencies Ω as random-walk states.
Distributed estimators run one filter per cluster of buses and receive the
phases of neighbouring buses from other clusters as inputs.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from compositional_inference.estimators import EstimatorKind, UkfParams
from compositional_inference.exceptions import InvalidParams
from compositional_inference.graph import InterfaceEdge, SubsystemNode, SystemGraph, build_graph
from compositional_inference.interface_laws import PhaseRelayLaw
from compositional_inference.models import GaussianBelief, IntegratorKind, StateSpaceModel, heun_corrector, heun_predictor
from compositional_inference.testbeds.matpower import BR_STATUS, BR_X, BUS_I, F_BUS, GEN_BUS, T_BUS, GridCase
from compositional_inference.testbeds.partition import Partition

logger = logging.getLogger(__name__)

CENTRAL = "grid"
NATURAL_FREQUENCIES = np.round(np.arange(-10, 11) / 10.0, 1)
POINT_ESTIMATORS = (EstimatorKind.WLS, EstimatorKind.WNLS)


class CouplingMode(Enum):
    MAGNITUDE = "magnitude"
    SUSCEPTANCE = "susceptance"


class KuramotoOrder(Enum):
    FIRST = "first"
    SECOND = "second"


def wrap_angle(x):
    """Map angles to (−π, π]."""
    return np.pi - np.mod(np.pi - np.asarray(x, dtype=float), 2.0 * np.pi)


def coupling_from_ybus(case: GridCase, mode: CouplingMode = CouplingMode.MAGNITUDE) -> np.ndarray:
    """K_ij = |Y_ij| or Im(Y_ij) for i ≠ j, with a zero diagonal."""
    y_bus = case.ybus
    k = np.abs(y_bus) if mode is CouplingMode.MAGNITUDE else y_bus.imag.copy()
    np.fill_diagonal(k, 0.0)
    return k


@dataclass(frozen=True)
class KuramotoModel:
    coupling: np.ndarray
    natural: np.ndarray
    damping: np.ndarray
    theta0: np.ndarray
    omega0: np.ndarray
    order: KuramotoOrder = KuramotoOrder.SECOND
    case_name: str = "grid"

    def __post_init__(self):
        k = np.asarray(self.coupling, dtype=float)
        n = k.shape[0]
        if k.shape != (n, n):
            raise InvalidParams(f"Coupling matrix must be square, got {k.shape}")
        for name in ("natural", "damping", "theta0", "omega0"):
            value = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if value.shape != (n,):
                raise InvalidParams(f"{name} needs {n} entries, got {value.shape[0]}")
            object.__setattr__(self, name, value)
        if np.any(self.damping <= 0):
            raise InvalidParams("Damping coefficients must be positive")
        object.__setattr__(self, "coupling", k)

    @property
    def n_bus(self) -> int:
        return self.coupling.shape[0]

    @property
    def second_order(self) -> bool:
        return self.order is KuramotoOrder.SECOND

    @property
    def obs_dim(self) -> int:
        return 2 * self.n_bus if self.second_order else self.n_bus

    def initial_state(self) -> np.ndarray:
        if self.second_order:
            return np.concatenate([self.theta0, self.omega0])
        return self.theta0.copy()


def build_kuramoto(
    case: GridCase,
    mode: CouplingMode = CouplingMode.MAGNITUDE,
    order: KuramotoOrder = KuramotoOrder.SECOND,
    rng: Optional[np.random.Generator] = None,
) -> KuramotoModel:
    """
    Draw a Kuramoto network on the topology of ``case``.

    Damping d ~ U(0.10, 0.30) rounded to two decimals, natural frequencies
    uniform over {−1.0, −0.9, ..., 1.0} rad/s, θ₀ ~ U(−0.5, 0.5) and
    ω₀ ~ U(−0.2, 0.2), in that order. ω₀ is drawn for first-order models
    too so both orders share the same phases.
    """
    if rng is None:
        raise InvalidParams("An rng is required to draw Kuramoto parameters")
    n = case.n_bus
    damping = np.round(rng.uniform(0.10, 0.30, n), 2)
    natural = rng.choice(NATURAL_FREQUENCIES, n)
    theta0 = wrap_angle(rng.uniform(-0.5, 0.5, n))
    omega0 = rng.uniform(-0.2, 0.2, n)
    logger.debug(f"Drew {order.value}-order Kuramoto model on '{case.name}' ({n} buses, {mode.value} coupling)")
    return KuramotoModel(coupling_from_ybus(case, mode), natural, damping, theta0, omega0, order, case.name)


class _ClusterDynamics:
    """
    Dynamics of a set of buses, with external buses entering through the input.

    State layout: [θ, ω, Ω] (second order) or [θ, Ω] (first order); the Ω
    block is present only when the natural frequencies are estimated,
    otherwise ``natural`` is used as a fixed value.
    """

    def __init__(
        self,
        model: KuramotoModel,
        buses: Sequence[int],
        external: Sequence[int] = (),
        estimate_natural: bool = False,
        natural: Optional[np.ndarray] = None,
    ):
        buses, external = list(buses), list(external)
        self.m = len(buses)
        self.second = model.second_order
        self.k_int = model.coupling[np.ix_(buses, buses)]
        self.k_ext = model.coupling[np.ix_(buses, external)] if external else np.zeros((self.m, 0))
        self.damping = model.damping[buses]
        self.estimate_natural = estimate_natural
        self.fixed_natural = model.natural[buses] if natural is None else np.asarray(natural, dtype=float)
        self.n_dyn = 2 * self.m if self.second else self.m

    @property
    def state_dim(self) -> int:
        return self.n_dyn + (self.m if self.estimate_natural else 0)

    def torque(self, theta: np.ndarray, u: np.ndarray) -> np.ndarray:
        out = (self.k_int * np.sin(theta[None, :] - theta[:, None])).sum(axis=1)
        if self.k_ext.shape[1]:
            out = out + (self.k_ext * np.sin(u[None, :] - theta[:, None])).sum(axis=1)
        return out

    def natural(self, z: np.ndarray) -> np.ndarray:
        return z[self.n_dyn:] if self.estimate_natural else self.fixed_natural

    def derivative(self, z, u) -> np.ndarray:
        m = self.m
        theta = z[:m]
        forcing = self.natural(z) + self.torque(theta, u)
        if self.second:
            omega = z[m:2 * m]
            parts = [omega, forcing - self.damping * omega]
        else:
            parts = [forcing]
        if self.estimate_natural:
            parts.append(np.zeros(m))
        return np.concatenate(parts)

    def measurement(self, z, u) -> np.ndarray:
        return z[:self.n_dyn]

    def residual(self, y, y_hat) -> np.ndarray:
        r = np.asarray(y, dtype=float) - np.asarray(y_hat, dtype=float)
        r[:self.m] = wrap_angle(r[:self.m])
        return r

    def normalize(self, z) -> np.ndarray:
        z = np.array(z, dtype=float, copy=True)
        z[:self.m] = wrap_angle(z[:self.m])
        return z


@dataclass(frozen=True)
class GridTruth:
    """Heun-integrated trajectories on t_n = n·dt and measurements at t_1 .. t_N."""

    times: np.ndarray
    theta: np.ndarray
    theta_unwrapped: np.ndarray
    omega: np.ndarray
    measurements: np.ndarray
    sigma: float

    @property
    def n_steps(self) -> int:
        return self.times.shape[0] - 1


def simulate_truth(
    model: KuramotoModel,
    horizon: float = 3.0,
    dt: float = 0.01,
    sigma: float = 0.02,
    rng: Optional[np.random.Generator] = None,
) -> GridTruth:
    """
    Integrate the network with Heun and add N(0, σ²) noise to every channel.

    Phases are integrated continuously and reported wrapped to (−π, π];
    the measured phases are wrapped after the noise is added.

    Raises:
        NonFinite: If the integration produces NaN or Inf
    """
    if horizon <= 0 or dt <= 0:
        raise InvalidParams(f"horizon and dt must be positive, got {horizon}, {dt}")
    if sigma < 0:
        raise InvalidParams(f"sigma must be non-negative, got {sigma}")
    if sigma > 0 and rng is None:
        raise InvalidParams("An rng is required to synthesise noisy measurements")
    n, n_steps = model.n_bus, int(round(horizon / dt))
    dynamics = _ClusterDynamics(model, range(n))
    u = np.zeros(0)
    states = np.empty((n_steps + 1, dynamics.n_dyn))
    states[0] = model.initial_state()
    for step in range(n_steps):
        z_pred, f0 = heun_predictor(dynamics.derivative, states[step], u, dt)
        states[step + 1] = heun_corrector(dynamics.derivative, states[step], f0, z_pred, u, dt)

    theta_unwrapped = states[:, :n]
    if model.second_order:
        omega = states[:, n:]
    else:
        omega = np.vstack([dynamics.derivative(z, u) for z in states])
    clean = states[1:].copy()
    noise = rng.normal(0.0, sigma, clean.shape) if sigma > 0 else np.zeros_like(clean)
    measurements = clean + noise
    measurements[:, :n] = wrap_angle(measurements[:, :n])
    logger.debug(f"Simulated '{model.case_name}' for {n_steps} steps with sigma={sigma}")
    return GridTruth(
        np.arange(n_steps + 1) * dt, wrap_angle(theta_unwrapped), theta_unwrapped, omega, measurements, sigma
    )


@dataclass(frozen=True)
class GridEstimatorOptions:
    """
    Filter tuning for the grid estimators.

    ``sweeps``, ``adaptive_q``, ``p0_natural`` and ``omega_clip`` form the
    stabilised configuration for large networks: several Jacobi sweeps per
    step, Q_Ω = 1e-4·(1 + 5ρ_s) per cluster with ρ_s the mean share of
    coupling a cluster's buses have outside it, a wider Ω prior, and a hard
    |Ω| clip on the posterior mean.
    """

    sigma: float = 0.02
    p0_theta: float = 0.25
    p0_omega: float = 0.25
    p0_natural: float = 1.0
    q_state: float = 1e-4
    q_natural_central: float = 1e-4
    q_natural_distributed: float = 1e-9
    adaptive_q: bool = False
    omega_clip: Optional[float] = None
    sweeps: int = 1
    ukf_params: UkfParams = UkfParams.from_gamma(1)
    integrator: IntegratorKind = IntegratorKind.HEUN

    def __post_init__(self):
        if self.sigma <= 0:
            raise InvalidParams(f"Estimator sigma must be positive, got {self.sigma}")
        if min(self.p0_theta, self.p0_omega, self.p0_natural) <= 0:
            raise InvalidParams("Prior variances must be positive")
        if min(self.q_state, self.q_natural_central, self.q_natural_distributed) < 0:
            raise InvalidParams("Process noise must be non-negative")
        if self.omega_clip is not None and self.omega_clip <= 0:
            raise InvalidParams(f"omega_clip must be positive, got {self.omega_clip}")
        if self.sweeps < 1:
            raise InvalidParams(f"sweeps must be >= 1, got {self.sweeps}")


def initial_estimate(model: KuramotoModel, rng: np.random.Generator, variance: float = 0.04) -> Tuple[np.ndarray, np.ndarray]:
    """Perturbed initial phases and frequencies, shared by every compared estimator."""
    theta = wrap_angle(model.theta0 + rng.normal(0.0, np.sqrt(variance), model.n_bus))
    omega = model.omega0 + rng.normal(0.0, np.sqrt(variance), model.n_bus)
    return theta, omega


def _make_model(
    model: KuramotoModel,
    buses: Sequence[int],
    external: Sequence[int],
    estimator: EstimatorKind,
    options: GridEstimatorOptions,
    q_natural: float,
    dt: float,
    name: str,
) -> Tuple[StateSpaceModel, _ClusterDynamics]:
    point = estimator in POINT_ESTIMATORS
    natural = np.zeros(len(buses)) if point else None
    dynamics = _ClusterDynamics(model, buses, external, estimate_natural=not point, natural=natural)
    q_diag = [options.q_state] * dynamics.n_dyn + ([] if point else [q_natural] * dynamics.m)
    selection = np.eye(dynamics.n_dyn, dynamics.state_dim)
    ssm = StateSpaceModel(
        state_dim=dynamics.state_dim,
        input_dim=len(external),
        transition=dynamics.derivative,
        measurement=dynamics.measurement,
        q=np.diag(q_diag),
        r=options.sigma ** 2 * np.eye(dynamics.n_dyn),
        dt=dt,
        continuous=True,
        integrator=options.integrator,
        measurement_jacobian=lambda z, u: selection,
        measurement_residual=dynamics.residual,
        state_normalizer=dynamics.normalize,
        name=name,
    )
    return ssm, dynamics


def _prior(model, buses, theta_hat, omega_hat, estimator, options) -> GaussianBelief:
    idx = list(buses)
    means = [np.asarray(theta_hat, dtype=float)[idx]]
    variances = [options.p0_theta] * len(idx)
    if model.second_order:
        means.append(np.asarray(omega_hat, dtype=float)[idx])
        variances += [options.p0_omega] * len(idx)
    if estimator not in POINT_ESTIMATORS:
        means.append(np.zeros(len(idx)))
        variances += [options.p0_natural] * len(idx)
    return GaussianBelief(np.concatenate(means), np.diag(variances))


def centralized_graph(
    model: KuramotoModel,
    theta_hat,
    omega_hat,
    estimator: EstimatorKind = EstimatorKind.UKF,
    options: GridEstimatorOptions = GridEstimatorOptions(),
    dt: float = 0.01,
) -> SystemGraph:
    """Single-node graph estimating the whole network."""
    buses = range(model.n_bus)
    ssm, _ = _make_model(model, buses, (), estimator, options, options.q_natural_central, dt, CENTRAL)
    node = SubsystemNode(
        node_id=CENTRAL,
        model=ssm,
        estimator=estimator,
        belief=_prior(model, buses, theta_hat, omega_hat, estimator, options),
        measurement_source=CENTRAL,
        ukf_params=options.ukf_params,
    )
    return build_graph([node], [])


@dataclass(frozen=True)
class GridCluster:
    name: str
    buses: Tuple[int, ...]
    external: Tuple[int, ...]
    external_ratio: float

    def local_index(self, bus: int) -> int:
        return self.buses.index(bus)


def cluster_layout(model: KuramotoModel, partition: Partition) -> Tuple[GridCluster, ...]:
    """
    Name the clusters C1, C2, ... and list the outside buses each one couples to.

    ``external_ratio`` is the mean over the cluster's buses of the share of
    their total coupling that leaves the cluster.
    """
    k = model.coupling
    clusters = []
    for i, members in enumerate(partition.clusters):
        inside = set(members)
        external = tuple(
            j for j in range(model.n_bus) if j not in inside and np.any(k[list(members), j] != 0)
        )
        ratios = []
        for a in members:
            total = float(np.abs(k[a]).sum())
            outside = total - float(np.abs(k[a, list(members)]).sum())
            ratios.append(outside / total if total > 0 else 0.0)
        clusters.append(GridCluster(f"C{i + 1}", tuple(members), external, float(np.mean(ratios))))
    return tuple(clusters)


def distributed_graph(
    model: KuramotoModel,
    partition: Partition,
    theta_hat,
    omega_hat,
    estimator: EstimatorKind = EstimatorKind.UKF,
    options: GridEstimatorOptions = GridEstimatorOptions(),
    dt: float = 0.01,
) -> SystemGraph:
    """
    One node per cluster, joined by phase-relay edges.

    The edge from cluster s to cluster c carries the phases of the buses of
    s that c couples to; they land in c's input slots for those buses.
    """
    clusters = cluster_layout(model, partition)
    owner = {bus: cluster for cluster in clusters for bus in cluster.buses}
    nodes: List[SubsystemNode] = []
    edges: List[InterfaceEdge] = []
    point = estimator in POINT_ESTIMATORS
    for cluster in clusters:
        q_natural = options.q_natural_distributed
        if options.adaptive_q:
            q_natural = 1e-4 * (1.0 + 5.0 * cluster.external_ratio)
        ssm, dynamics = _make_model(model, cluster.buses, cluster.external, estimator, options, q_natural, dt, cluster.name)
        clip: Tuple[Tuple[int, float], ...] = ()
        if options.omega_clip is not None and not point:
            clip = tuple((dynamics.n_dyn + i, options.omega_clip) for i in range(dynamics.m))
        nodes.append(SubsystemNode(
            node_id=cluster.name,
            model=ssm,
            estimator=estimator,
            belief=_prior(model, cluster.buses, theta_hat, omega_hat, estimator, options),
            interface_selector=tuple(range(dynamics.m)),
            measurement_source=cluster.name,
            ukf_params=options.ukf_params,
            clip=clip,
        ))

        by_sender: Dict[str, List[int]] = {}
        for bus in cluster.external:
            by_sender.setdefault(owner[bus].name, []).append(bus)
        for sender_name, buses in by_sender.items():
            sender = next(c for c in clusters if c.name == sender_name)
            edges.append(InterfaceEdge(
                sender=sender_name,
                receiver=cluster.name,
                law=PhaseRelayLaw(len(buses)),
                sender_selector=tuple(sender.local_index(b) for b in buses),
                receiver_selector=(),
                target_indices=tuple(cluster.external.index(b) for b in buses),
                label="theta",
            ))
    logger.debug(f"Distributed grid graph: {len(nodes)} clusters, {len(edges)} relay edges")
    return build_graph(nodes, edges)


def measurement_channels(model: KuramotoModel, measurements: np.ndarray, partition: Optional[Partition] = None) -> Dict[str, np.ndarray]:
    """Split the network-wide measurement series into the central channel and per-cluster channels."""
    out = {CENTRAL: np.asarray(measurements, dtype=float)}
    if partition is None:
        return out
    n = model.n_bus
    for i, members in enumerate(partition.clusters):
        columns = list(members) + ([n + b for b in members] if model.second_order else [])
        out[f"C{i + 1}"] = out[CENTRAL][:, columns]
    return out


def assemble_estimates(model: KuramotoModel, trace, partition: Optional[Partition] = None) -> Dict[str, np.ndarray]:
    """
    Network-wide mean and variance series from a run trace.

    Returns arrays keyed ``theta``, ``omega`` and (when estimated) ``natural``
    together with ``<key>_var``, each of shape (n_steps + 1, n_bus).
    """
    n = model.n_bus
    groups = [(CENTRAL, tuple(range(n)))] if partition is None else [
        (f"C{i + 1}", members) for i, members in enumerate(partition.clusters)
    ]
    first = trace.means[groups[0][0]]
    n_rows = first.shape[0]
    blocks = ["theta", "omega"] if model.second_order else ["theta"]
    state_dim = first.shape[1] // len(groups[0][1])
    if state_dim > len(blocks):
        blocks.append("natural")
    out = {}
    for block_index, key in enumerate(blocks):
        mean = np.zeros((n_rows, n))
        var = np.zeros((n_rows, n))
        for node_id, members in groups:
            m = len(members)
            cols = slice(block_index * m, (block_index + 1) * m)
            mean[:, list(members)] = trace.means[node_id][:, cols]
            var[:, list(members)] = trace.variances[node_id][:, cols]
        out[key] = mean
        out[f"{key}_var"] = var
    return out


def tile_case(case: GridCase, copies: int, tie_x: float = 0.1) -> GridCase:
    """
    Join ``copies`` renumbered copies of ``case`` into one network.

    Copy i+1 is tied to copy i by a lossless line of reactance ``tie_x``
    from the highest-numbered bus of copy i to the lowest-numbered bus of
    copy i+1.
    """
    if copies < 1:
        raise InvalidParams(f"copies must be >= 1, got {copies}")
    if copies == 1:
        return case
    offset = int(case.bus[:, BUS_I].max())
    first, last = int(case.bus[:, BUS_I].min()), offset
    buses, gens, branches = [], [], []
    for i in range(copies):
        shift = i * offset
        bus = case.bus.copy()
        bus[:, BUS_I] += shift
        buses.append(bus)
        if case.gen.size:
            gen = case.gen.copy()
            gen[:, GEN_BUS] += shift
            gens.append(gen)
        branch = case.branch.copy()
        branch[:, [F_BUS, T_BUS]] += shift
        branches.append(branch)
        if i:
            tie = np.zeros((1, case.branch.shape[1]))
            tie[0, [F_BUS, T_BUS, BR_X, BR_STATUS]] = [last + (i - 1) * offset, first + shift, tie_x, 1.0]
            branches.append(tie)
    gen_table = np.vstack(gens) if gens else case.gen
    return GridCase(f"{case.name}x{copies}", case.base_mva, np.vstack(buses), gen_table, np.vstack(branches))
