"""
Coupling schedules that advance every node of a ``SystemGraph`` in time.

Data layout shared by all schedules, for ``n_steps = horizon / dt``:

    measurements[channel]  shape (n_steps, obs_dim); row n is observed at t_{n+1}
    inputs[channel]        shape (n_steps + 1, input_dim); row n applies at t_n

Each outer time step performs ``inner_iterations`` sweeps of message
exchange. Filters predict from their step-start belief in every sweep and
assimilate the measurement once, in the last sweep.

Under Jacobi, deterministic nodes that integrate with Heun exchange their
predictor states between the two Heun stages. A graph made only of such
nodes therefore reproduces the monolithic Heun integration of the coupled
system; further sweeps iterate the corrector toward the implicit
trapezoidal coupling.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from compositional_inference.estimators import EstimatorKind, estimator_predict, estimator_update
from compositional_inference.exceptions import InvalidParams, MissingMeasurement, NonFinite
from compositional_inference.graph import (
    GlobalRegister,
    MessageMode,
    NodeInputs,
    SubsystemNode,
    SystemGraph,
    collect_messages,
)
from compositional_inference.interface_laws import VarianceTracker, incremental_variance, inject_process_noise
from compositional_inference.models import (
    GaussianBelief,
    IntegratorKind,
    heun_corrector,
    heun_predictor,
    integrate_step,
)

logger = logging.getLogger(__name__)

EdgeKey = Tuple[str, str, str]


class ScheduleKind(Enum):
    JACOBI = "jacobi"
    GAUSS_SEIDEL = "gauss_seidel"
    AB2 = "ab2"


@dataclass(frozen=True)
class ScheduleConfig:
    kind: ScheduleKind = ScheduleKind.JACOBI
    inner_iterations: int = 1
    gs_order: Optional[Tuple[str, ...]] = None
    horizon: float = 1.0
    dt: float = 1e-3
    threads: int = 1
    divergence_limit: float = 1e12

    def __post_init__(self):
        if self.inner_iterations < 1:
            raise InvalidParams(f"inner_iterations must be >= 1, got {self.inner_iterations}")
        if self.kind is ScheduleKind.AB2 and self.inner_iterations != 1:
            raise InvalidParams("AB2 exchanges messages once per step; inner_iterations must be 1")
        if self.horizon <= 0 or self.dt <= 0:
            raise InvalidParams(f"horizon and dt must be positive, got {self.horizon}, {self.dt}")
        if self.threads < 1:
            raise InvalidParams(f"threads must be >= 1, got {self.threads}")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass
class RunTrace:
    """Per-step beliefs, messages and injected variances of one schedule run."""

    times: np.ndarray
    means: Dict[str, np.ndarray]
    variances: Dict[str, np.ndarray]
    final_beliefs: Dict[str, GaussianBelief]
    messages: Dict[EdgeKey, np.ndarray]
    message_variances: Dict[EdgeKey, np.ndarray]
    injected: Dict[EdgeKey, np.ndarray]
    sweep_seconds: List[float] = field(default_factory=list)

    def series(self, node_id: str, index: int) -> np.ndarray:
        return self.means[node_id][:, index]

    def std(self, node_id: str, index: int) -> np.ndarray:
        return np.sqrt(np.clip(self.variances[node_id][:, index], 0.0, None))

    @property
    def wall_clock(self) -> float:
        return float(sum(self.sweep_seconds))


class _Recorder:
    def __init__(self, graph: SystemGraph, dt: float, n_steps: int):
        self.graph = graph
        self.times = np.arange(n_steps + 1) * dt
        self.means = {nid: [node.belief.mean.copy()] for nid, node in graph.nodes.items()}
        self.variances = {nid: [np.diag(node.belief.cov).copy()] for nid, node in graph.nodes.items()}
        self.messages: Dict[EdgeKey, list] = {edge.key: [] for edge in graph.edges}
        self.message_variances: Dict[EdgeKey, list] = {edge.key: [] for edge in graph.edges}
        self.injected: Dict[EdgeKey, list] = {edge.key: [] for edge in graph.edges}
        self.sweep_seconds: List[float] = []

    def record_messages(self, inputs: Mapping[str, NodeInputs], injected: Mapping[EdgeKey, float]):
        for node_inputs in inputs.values():
            for key, message in node_inputs.messages.items():
                self.messages[key].append(message.mean)
                self.message_variances[key].append(np.nan if message.variance is None else message.variance)
                self.injected[key].append(injected.get(key, 0.0))

    def record_beliefs(self, beliefs: Mapping[str, GaussianBelief]):
        for nid, belief in beliefs.items():
            self.means[nid].append(belief.mean)
            self.variances[nid].append(np.diag(belief.cov).copy())

    def finish(self, beliefs: Mapping[str, GaussianBelief]) -> RunTrace:
        return RunTrace(
            times=self.times,
            means={nid: np.vstack(rows) for nid, rows in self.means.items()},
            variances={nid: np.vstack(rows) for nid, rows in self.variances.items()},
            final_beliefs=dict(beliefs),
            messages={k: np.vstack(v) if v else np.zeros((0, 0)) for k, v in self.messages.items()},
            message_variances={k: np.asarray(v, dtype=float) for k, v in self.message_variances.items()},
            injected={k: np.asarray(v, dtype=float) for k, v in self.injected.items()},
            sweep_seconds=self.sweep_seconds,
        )


class _Run:
    """Mutable per-run state shared by the three schedules."""

    def __init__(self, graph, config, measurements, inputs):
        self.graph = graph
        self.config = config
        self.measurements = measurements or {}
        self.inputs = inputs or {}
        self.beliefs: Dict[str, GaussianBelief] = {nid: node.belief for nid, node in graph.nodes.items()}
        self.q: Dict[str, np.ndarray] = {nid: node.model.q for nid, node in graph.nodes.items()}
        self.prev_f: Dict[str, Optional[np.ndarray]] = {nid: None for nid in graph.nodes}
        self.tracker = VarianceTracker()
        self.register = GlobalRegister.from_graph(graph)
        self.recorder = _Recorder(graph, config.dt, config.n_steps)
        self._check_data()

    def _check_data(self):
        n_steps = self.config.n_steps
        for nid, node in self.graph.nodes.items():
            if node.filters:
                series = self.measurements.get(node.measurement_source)
                if series is None or len(series) < n_steps:
                    logger.error(f"Node '{nid}' lacks measurements from channel '{node.measurement_source}'")
                    raise MissingMeasurement(
                        f"Node '{nid}' needs {n_steps} measurements from channel '{node.measurement_source}'"
                    )
            if node.input_source is not None:
                series = self.inputs.get(node.input_source)
                if series is None or len(series) < n_steps + 1:
                    raise MissingMeasurement(f"Node '{nid}' lacks exogenous inputs '{node.input_source}'")
            if abs(node.model.dt - self.config.dt) > 1e-12 * self.config.dt:
                raise InvalidParams(f"Node '{nid}' model dt {node.model.dt} differs from schedule dt {self.config.dt}")

    def exogenous(self, node: SubsystemNode, step: int) -> np.ndarray:
        if node.input_source is None:
            return node.model.zero_input()
        return np.asarray(self.inputs[node.input_source][step], dtype=float)

    def observation(self, node: SubsystemNode, step: int) -> Optional[np.ndarray]:
        if not node.filters:
            return None
        return np.asarray(self.measurements[node.measurement_source][step], dtype=float)

    def gather(self, nid: str, register: GlobalRegister, step: int) -> NodeInputs:
        node = self.graph.nodes[nid]
        inputs = collect_messages(nid, register, self.graph.incoming[nid], node.model.input_dim)
        inputs.u = inputs.u + self.exogenous(node, step)
        return inputs

    def inject(self, nid: str, inputs: NodeInputs) -> Dict[EdgeKey, float]:
        """Grow the receiver's process noise by the incremental probabilistic variance."""
        injected = {}
        node = self.graph.nodes[nid]
        for edge in self.graph.incoming[nid]:
            if edge.mode is not MessageMode.PROBABILISTIC:
                continue
            variance = inputs.messages[edge.key].variance
            used = incremental_variance(self.tracker, edge.key, variance)
            self.q[nid] = inject_process_noise(
                self.q[nid], used, node.model.dt, edge.receiver_mass, edge.noise_state_index
            )
            injected[edge.key] = used
        return injected

    def filter_node(self, nid: str, u: np.ndarray, step: int, assimilate: bool) -> GaussianBelief:
        node = self.graph.nodes[nid]
        model = node.model if self.q[nid] is node.model.q else node.model.with_q(self.q[nid])
        belief = self.beliefs[nid]
        if node.estimator is EstimatorKind.DETERMINISTIC:
            return GaussianBelief(model.step(belief.mean, u), belief.cov)
        predicted = estimator_predict(node.estimator, model, belief, u, node.ukf_params)
        if not assimilate:
            return predicted
        y = self.observation(node, step)
        options = {"iters": node.wnls_iters, "damping": node.wnls_damping}
        return estimator_update(node.estimator, model, predicted, u, y, node.ukf_params, options)

    def finalize(self, nid: str, belief: GaussianBelief) -> GaussianBelief:
        node = self.graph.nodes[nid]
        if not node.clip:
            return belief
        mean = belief.mean.copy()
        for index, bound in node.clip:
            mean[index] = np.clip(mean[index], -bound, bound)
        return GaussianBelief(mean, belief.cov)

    def end_step(self, beliefs: Dict[str, GaussianBelief], step: int):
        limit = self.config.divergence_limit
        for nid, belief in beliefs.items():
            if not np.all(np.isfinite(belief.mean)) or np.max(np.abs(belief.mean), initial=0.0) > limit:
                logger.error(f"Node '{nid}' diverged at step {step}")
                raise NonFinite(f"Node '{nid}' state diverged at step {step} (t={(step + 1) * self.config.dt:.6g} s)")
        self.beliefs.update(beliefs)
        self.recorder.record_beliefs(beliefs)


def _is_staged(node: SubsystemNode) -> bool:
    return (
        node.estimator is EstimatorKind.DETERMINISTIC
        and node.model.continuous
        and node.model.integrator is IntegratorKind.HEUN
    )


def _map_nodes(fn: Callable[[str], GaussianBelief], node_ids, threads: int) -> Dict[str, GaussianBelief]:
    if threads > 1 and len(node_ids) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(fn, node_ids))
    else:
        results = [fn(nid) for nid in node_ids]
    return dict(zip(node_ids, results))


def run_jacobi(
    graph: SystemGraph,
    config: ScheduleConfig,
    measurements: Optional[Mapping[str, np.ndarray]] = None,
    inputs: Optional[Mapping[str, np.ndarray]] = None,
) -> RunTrace:
    """
    Jacobi schedule: every node reads the previous register label only.

    Node updates within a sweep are independent and run on ``config.threads``
    worker threads; results are committed in graph order, so the trace does
    not depend on the thread count.

    Args:
        graph: System graph
        config: Schedule configuration
        measurements: Observation series per channel
        inputs: Exogenous input series per channel

    Returns:
        Run trace

    Raises:
        NonFinite: If any node state diverges
        MissingMeasurement: If a filtering node has no observation series
    """
    run = _Run(graph, config, measurements, inputs)
    node_ids = graph.node_ids
    staged = [nid for nid in node_ids if _is_staged(graph.nodes[nid])]
    logger.debug(f"Jacobi run: {config.n_steps} steps, K={config.inner_iterations}, {len(staged)} staged nodes")

    for step in range(config.n_steps):
        tic = time.perf_counter()
        start = run.register.snapshot()
        start_inputs = {nid: run.gather(nid, start, step) for nid in node_ids}
        injected: Dict[EdgeKey, float] = {}
        for nid in node_ids:
            injected.update(run.inject(nid, start_inputs[nid]))

        predictors: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
        view = start
        beliefs: Dict[str, GaussianBelief] = {}
        for sweep in range(config.inner_iterations):
            final = sweep == config.inner_iterations - 1
            previous = view
            if staged and sweep == 0:
                for nid in staged:
                    node = graph.nodes[nid]
                    x_pred, f0 = heun_predictor(node.model.transition, run.beliefs[nid].mean, start_inputs[nid].u, config.dt)
                    predictors[nid] = (x_pred, f0)
                    run.register.write(nid, x_pred, run.beliefs[nid].cov)
                run.register.commit()
                stage_view = run.register.snapshot()
            elif staged:
                stage_view = previous
                for nid in staged:
                    predictors[nid] = (previous.read(nid).mean, predictors[nid][1])

            def update(nid: str) -> GaussianBelief:
                node = graph.nodes[nid]
                if nid in predictors:
                    u_end = run.gather(nid, stage_view, step + 1).u
                    x_pred, f0 = predictors[nid]
                    x_next = heun_corrector(node.model.transition, run.beliefs[nid].mean, f0, x_pred, u_end, config.dt)
                    return GaussianBelief(x_next, run.beliefs[nid].cov)
                u = start_inputs[nid].u if sweep == 0 else run.gather(nid, previous, step).u
                return run.filter_node(nid, u, step, assimilate=final)

            beliefs = _map_nodes(update, node_ids, config.threads)
            if final:
                beliefs = {nid: run.finalize(nid, belief) for nid, belief in beliefs.items()}
            for nid in node_ids:
                run.register.write(nid, beliefs[nid].mean, beliefs[nid].cov)
            run.register.commit()
            view = run.register.snapshot()

        run.recorder.record_messages(start_inputs, injected)
        run.end_step(beliefs, step)
        run.recorder.sweep_seconds.append(time.perf_counter() - tic)
    return run.recorder.finish(run.beliefs)


def run_gauss_seidel(
    graph: SystemGraph,
    config: ScheduleConfig,
    measurements: Optional[Mapping[str, np.ndarray]] = None,
    inputs: Optional[Mapping[str, np.ndarray]] = None,
) -> RunTrace:
    """
    Gauss-Seidel schedule: nodes update sequentially in ``config.gs_order``
    and later nodes see the freshest entries of those already updated.
    """
    run = _Run(graph, config, measurements, inputs)
    order = tuple(config.gs_order) if config.gs_order else graph.node_ids
    if sorted(order) != sorted(graph.node_ids):
        raise InvalidParams(f"gs_order {order} is not a permutation of the node ids {graph.node_ids}")

    for step in range(config.n_steps):
        tic = time.perf_counter()
        used_inputs: Dict[str, NodeInputs] = {}
        injected: Dict[EdgeKey, float] = {}
        beliefs: Dict[str, GaussianBelief] = {}
        for sweep in range(config.inner_iterations):
            final = sweep == config.inner_iterations - 1
            for nid in order:
                node_inputs = run.gather(nid, run.register, step)
                if sweep == 0:
                    used_inputs[nid] = node_inputs
                    injected.update(run.inject(nid, node_inputs))
                belief = run.filter_node(nid, node_inputs.u, step, assimilate=final)
                if final:
                    belief = run.finalize(nid, belief)
                beliefs[nid] = belief
                run.register.publish(nid, belief.mean, belief.cov)
        run.register.label += 1
        run.recorder.record_messages(used_inputs, injected)
        run.end_step({nid: beliefs[nid] for nid in graph.node_ids}, step)
        run.recorder.sweep_seconds.append(time.perf_counter() - tic)
    return run.recorder.finish(run.beliefs)


def _ab2_model(node: SubsystemNode, q: np.ndarray, prev_f: Optional[np.ndarray]):
    """One-step model advancing with AB2 against a frozen previous derivative."""
    model = node.model.with_q(q)
    derivative = node.model.transition
    dt = node.model.dt
    if prev_f is None:
        def bootstrap(x, u):
            return integrate_step(IntegratorKind.HEUN, derivative, x, u, dt)[0]
        return model.with_transition(bootstrap, continuous=False)

    def advance(x, u):
        return x + dt * (1.5 * np.asarray(derivative(x, u), dtype=float) - 0.5 * prev_f)

    return model.with_transition(advance, continuous=False)


def run_ab2(
    graph: SystemGraph,
    config: ScheduleConfig,
    measurements: Optional[Mapping[str, np.ndarray]] = None,
    inputs: Optional[Mapping[str, np.ndarray]] = None,
) -> RunTrace:
    """
    AB2 schedule: messages from the current register label, states advanced
    with x + dt·(1.5 f_n − 0.5 f_{n−1}); the first step uses Heun.

    Filtering nodes propagate their sigma points (or mean) through the AB2
    map with the previous derivative taken at the previous posterior mean.
    """
    for nid, node in graph.nodes.items():
        if not node.model.continuous:
            raise InvalidParams(f"AB2 needs continuous models; node '{nid}' is discrete")
    run = _Run(graph, config, measurements, inputs)

    for step in range(config.n_steps):
        tic = time.perf_counter()
        current = run.register.snapshot()
        used_inputs: Dict[str, NodeInputs] = {}
        injected: Dict[EdgeKey, float] = {}
        beliefs: Dict[str, GaussianBelief] = {}
        for nid in graph.node_ids:
            node = graph.nodes[nid]
            node_inputs = run.gather(nid, current, step)
            used_inputs[nid] = node_inputs
            injected.update(run.inject(nid, node_inputs))
            u = node_inputs.u
            belief = run.beliefs[nid]
            if node.estimator is EstimatorKind.DETERMINISTIC:
                x_next, f_n = integrate_step(IntegratorKind.AB2, node.model.transition, belief.mean, u, config.dt, run.prev_f[nid])
                new_belief = GaussianBelief(x_next, belief.cov)
            else:
                f_n = np.asarray(node.model.transition(belief.mean, u), dtype=float)
                model = _ab2_model(node, run.q[nid], run.prev_f[nid])
                predicted = estimator_predict(node.estimator, model, belief, u, node.ukf_params)
                y = run.observation(node, step)
                options = {"iters": node.wnls_iters, "damping": node.wnls_damping}
                new_belief = estimator_update(node.estimator, model, predicted, u, y, node.ukf_params, options)
            run.prev_f[nid] = f_n
            beliefs[nid] = run.finalize(nid, new_belief)
            run.register.write(nid, beliefs[nid].mean, beliefs[nid].cov)
        run.register.commit()
        run.recorder.record_messages(used_inputs, injected)
        run.end_step(beliefs, step)
        run.recorder.sweep_seconds.append(time.perf_counter() - tic)
    return run.recorder.finish(run.beliefs)


SCHEDULES = {
    ScheduleKind.JACOBI: run_jacobi,
    ScheduleKind.GAUSS_SEIDEL: run_gauss_seidel,
    ScheduleKind.AB2: run_ab2,
}


def run_schedule(graph, config: ScheduleConfig, measurements=None, inputs=None) -> RunTrace:
    return SCHEDULES[config.kind](graph, config, measurements, inputs)
