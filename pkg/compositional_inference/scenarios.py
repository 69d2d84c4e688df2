"""
Registered experiments.

Each scenario builds its testbed, simulates one set of synthetic
measurements per replicate, runs every compared method on that same data
and collects per-method metrics and trajectories into an
``ExperimentReport``. Replicate ``r`` draws all its randomness from
``make_rng(seed + r)``, so a configuration fully determines the report.

Usage:
    config = RunConfig.from_dict({"scenario": "chain4-inverse-det", "replicates": 1})
    report = run_scenario(config)
"""

import logging
import time
from dataclasses import dataclass, field
from functools import partial
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from compositional_inference.config import RunConfig
from compositional_inference.diffusion import (
    DEFAULT_BETA,
    DEFAULT_LEAKAGE,
    DefectSignal,
    DiffusionGraph,
    defect_force_mass,
    defect_force_stiffness,
    edge_weights_from_rms,
    heat_kernel_scores,
    one_hop_scores,
    sensitivity_envelope,
)
from compositional_inference.estimators import EstimatorKind, UkfParams
from compositional_inference.exceptions import CompositionalInferenceError, ConfigInvalid, IoError, UnknownScenario
from compositional_inference.graph import BoundaryPort, MessageMode, SystemGraph, embed_subgraph
from compositional_inference.interface_laws import LearnedLaw
from compositional_inference.metrics import MetricReport, coverage, scaling_study
from compositional_inference.models import IntegratorKind
from compositional_inference.numerics import make_rng
from compositional_inference.reports import ExperimentReport
from compositional_inference.schedules import RunTrace, ScheduleConfig, ScheduleKind, run_schedule
from compositional_inference.sindy import SindyConfig, fit_interface_law
from compositional_inference.testbeds import chain, grid
from compositional_inference.testbeds.matpower import GridCase, load_matpower_case
from compositional_inference.testbeds.partition import Partition, PartitionConfig, partition_generator_seeded

logger = logging.getLogger(__name__)

SINDY_SEED_OFFSET = 1_000_003

CHOICES = {
    "schedule": tuple(kind.value for kind in ScheduleKind),
    "integrator": tuple(kind.value for kind in IntegratorKind),
    "coupling": tuple(mode.value for mode in grid.CouplingMode),
    "order": tuple(order.value for order in grid.KuramotoOrder),
}


@dataclass(frozen=True)
class Scenario:
    name: str
    description: str
    runner: Callable[["ScenarioContext"], ExperimentReport]
    defaults: Mapping[str, Any] = field(default_factory=dict)


@dataclass
class ScenarioContext:
    """Resolved parameters and run settings handed to a scenario runner."""

    scenario: Scenario
    config: RunConfig
    params: Dict[str, Any]

    def rng(self, replicate: int, offset: int = 0) -> np.random.Generator:
        return make_rng(self.config.seed + offset + replicate)

    def schedule(self, kind: Optional[str] = None, horizon: Optional[float] = None) -> ScheduleConfig:
        kind = ScheduleKind(kind or self.params.get("schedule", ScheduleKind.JACOBI.value))
        inner = 1 if kind is ScheduleKind.AB2 else self.params.get("inner_iterations", 1)
        return ScheduleConfig(
            kind=kind,
            inner_iterations=inner,
            horizon=self.params["horizon"] if horizon is None else horizon,
            dt=self.params["dt"],
            threads=self.config.threads,
        )

    def report(self) -> ExperimentReport:
        echo = self.config.to_dict()
        echo["params"] = dict(self.params)
        return ExperimentReport(self.scenario.name, echo)


def _coerce(key: str, default: Any, value: Any) -> Any:
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, (list, tuple))
        value = list(value) if ok else value
    else:
        ok = value is None or (isinstance(value, (int, float)) and not isinstance(value, bool))
    if not ok:
        logger.error(f"Parameter '{key}' has the wrong type: {value!r}")
        raise ConfigInvalid(f"Parameter '{key}' expects {type(default).__name__}, got {value!r}")
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigInvalid(f"Parameter '{key}' must be one of {', '.join(CHOICES[key])}, got {value!r}")
    return value


def resolve_params(scenario: Scenario, overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """
    Scenario defaults updated with the configuration's ``params``.

    Raises:
        ConfigInvalid: On a parameter the scenario does not know or a value
            of the wrong type
    """
    unknown = sorted(set(overrides) - set(scenario.defaults))
    if unknown:
        logger.error(f"Unknown parameters {unknown} for scenario '{scenario.name}'")
        raise ConfigInvalid(
            f"Scenario '{scenario.name}' has no parameters {', '.join(unknown)}; "
            f"known: {', '.join(sorted(scenario.defaults))}"
        )
    params = {key: (list(value) if isinstance(value, tuple) else value) for key, value in scenario.defaults.items()}
    for key, value in overrides.items():
        params[key] = _coerce(key, scenario.defaults[key], value)
    return params


def _aggregate(method: str, reports: Sequence[MetricReport]) -> MetricReport:
    """Mean of every per-replicate metric; coverage, NLL and RMSE per replicate are kept in ``extra``."""
    first = reports[0]
    out = MetricReport(method, wall_clock=float(np.mean([r.wall_clock for r in reports])))
    for attr in ("rmse", "nrmse", "coverage"):
        target = getattr(out, attr)
        for key in getattr(first, attr):
            target[key] = float(np.mean([getattr(r, attr)[key] for r in reports]))
    out.nrmse_fallback = list(first.nrmse_fallback)
    if first.nll is not None:
        out.nll = float(np.mean([r.nll for r in reports]))
    for key, value in first.extra.items():
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            out.extra[key] = float(np.mean([r.extra[key] for r in reports]))
        else:
            out.extra[key] = value
    out.extra["replicates"] = len(reports)
    out.extra["per_replicate"] = {
        "rmse": [dict(r.rmse) for r in reports],
        "coverage": [dict(r.coverage) for r in reports],
        "nll": [r.nll for r in reports],
    }
    return out


# -- mass-spring-damper chains ---------------------------------------------


@dataclass
class ChainEstimate:
    """Per-DOF mean/variance series and physical parameter series of one run."""

    x: np.ndarray
    v: np.ndarray
    x_var: np.ndarray
    v_var: np.ndarray
    params: Dict[str, Tuple[chain.UnknownParam, np.ndarray, np.ndarray]]


def _chain_estimate(system: chain.ChainSystem, trace: RunTrace, node_ids: Optional[Mapping[str, str]] = None) -> ChainEstimate:
    n = system.params.n_dof
    rows = trace.times.shape[0]
    x, v, x_var, v_var = (np.zeros((rows, n)) for _ in range(4))
    params: Dict[str, Tuple[chain.UnknownParam, np.ndarray, np.ndarray]] = {}
    if chain.MONOLITHIC in trace.means:
        means, variances = trace.means[chain.MONOLITHIC], trace.variances[chain.MONOLITHIC]
        x[:], v[:] = means[:, :n], means[:, n:2 * n]
        x_var[:], v_var[:] = variances[:, :n], variances[:, n:2 * n]
        located = [(spec, chain.MONOLITHIC, system.monolithic_param_index(spec.kind, spec.index)) for spec in system.params.unknown]
    else:
        located = []
        for sub in system.subsystems:
            nid = (node_ids or {}).get(sub.name, sub.name)
            means, variances = trace.means[nid], trace.variances[nid]
            for dof in sub.dofs:
                x[:, dof], v[:, dof] = means[:, sub.x_index(dof)], means[:, sub.v_index(dof)]
                x_var[:, dof], v_var[:, dof] = variances[:, sub.x_index(dof)], variances[:, sub.v_index(dof)]
            located += [(spec, nid, sub.param_index(spec.kind, spec.index)) for spec in sub.unknown]
    for spec, nid, index in located:
        scale = system.params.reference(spec)
        params[spec.label] = (spec, trace.means[nid][:, index] * scale, trace.variances[nid][:, index] * scale ** 2)
    return ChainEstimate(x, v, x_var, v_var, params)


def _chain_metrics(method: str, system, truth: chain.ChainTruth, estimate: ChainEstimate, trace: RunTrace, calibration_dofs) -> MetricReport:
    report = MetricReport(method, wall_clock=trace.wall_clock)
    report.add_accuracy("x", estimate.x[1:], truth.displacement[1:])
    report.add_accuracy("v", estimate.v[1:], truth.velocity[1:])
    for label, (spec, mean, _) in estimate.params.items():
        true_value = system.params.true_value(spec)
        report.add_accuracy(label, mean[1:], np.full(mean.shape[0] - 1, true_value))
        report.extra[f"{label}_final"] = float(mean[-1])
        report.extra[f"{label}_relative_error"] = abs(float(mean[-1]) - true_value) / true_value
    if calibration_dofs:
        dofs = list(calibration_dofs)
        report.add_calibration(
            np.hstack([truth.displacement[1:, dofs], truth.velocity[1:, dofs]]),
            np.hstack([estimate.x[1:, dofs], estimate.v[1:, dofs]]),
            np.hstack([estimate.x_var[1:, dofs], estimate.v_var[1:, dofs]]),
        )
    return report


def _chain_columns(system, truth: chain.ChainTruth, estimate: ChainEstimate) -> Dict[str, np.ndarray]:
    columns = {}
    for dof in range(system.params.n_dof):
        label = dof + 1
        columns[f"x{label}_true"] = truth.displacement[:, dof]
        columns[f"x{label}"] = estimate.x[:, dof]
        columns[f"x{label}_std"] = np.sqrt(np.clip(estimate.x_var[:, dof], 0.0, None))
        columns[f"v{label}_true"] = truth.velocity[:, dof]
        columns[f"v{label}"] = estimate.v[:, dof]
        columns[f"v{label}_std"] = np.sqrt(np.clip(estimate.v_var[:, dof], 0.0, None))
    for label, (spec, mean, var) in estimate.params.items():
        columns[f"{label}_true"] = np.full(mean.shape[0], system.params.true_value(spec))
        columns[label] = mean
        columns[f"{label}_std"] = np.sqrt(np.clip(var, 0.0, None))
    return columns


def _chain_graph(method: str, system, x0, v0, p, learned=None) -> SystemGraph:
    ukf = UkfParams.from_gamma(p["ukf_gamma"])
    if method == "centralized":
        return chain.monolithic_graph(system, x0, v0, EstimatorKind.UKF, p["state_var"], ukf)
    modes = {
        "jacobi_det": MessageMode.DETERMINISTIC,
        "jacobi_prob": MessageMode.PROBABILISTIC,
        "jacobi_learned": MessageMode.PROBABILISTIC,
    }
    laws = learned if method == "jacobi_learned" else None
    return chain.chain_graph(system, x0, v0, EstimatorKind.UKF, modes[method], p["state_var"], ukf, laws)


def _initial_conditions(n_dof: int, x1: float, v1: float) -> Tuple[np.ndarray, np.ndarray]:
    x0, v0 = np.zeros(n_dof), np.zeros(n_dof)
    x0[0], v0[0] = x1, v1
    return x0, v0


def _chain_study(
    ctx: ScenarioContext,
    system: chain.ChainSystem,
    x0,
    v0,
    variances: Mapping[int, float],
    methods: Sequence[str],
    calibration_dofs: Sequence[int],
    learned: Optional[Mapping[int, LearnedLaw]] = None,
):
    """
    Run every method on each replicate's shared measurements.

    Returns:
        Tuple (report, per-method replicate metrics, first-replicate truth,
        first-replicate estimates, first-replicate traces)
    """
    p = ctx.params
    report = ctx.report()
    per_method: Dict[str, List[MetricReport]] = {method: [] for method in methods}
    estimates: Dict[str, ChainEstimate] = {}
    traces: Dict[str, RunTrace] = {}
    first_truth = None
    for replicate in range(ctx.config.replicates):
        truth, records = chain.simulate_truth(system.params, x0, v0, p["horizon"], p["dt"], variances, ctx.rng(replicate))
        channels, inputs = system.channels(records), system.input_channels(truth)
        for method in methods:
            graph = _chain_graph(method, system, x0, v0, p, learned)
            trace = run_schedule(graph, ctx.schedule(), channels, inputs)
            estimate = _chain_estimate(system, trace)
            per_method[method].append(_chain_metrics(method, system, truth, estimate, trace, calibration_dofs))
            if replicate == 0:
                estimates[method], traces[method] = estimate, trace
            logger.debug(f"Replicate {replicate}, {method}: RMSE x {per_method[method][-1].rmse['x']:.3e}")
        if replicate == 0:
            first_truth = truth
    for method in methods:
        report.metrics.append(_aggregate(method, per_method[method]))
        report.add_trajectory(method, first_truth.times, _chain_columns(system, first_truth, estimates[method]))
    return report, per_method, first_truth, estimates, traces


CHAIN4_DEFAULTS = {
    "horizon": 10.0,
    "dt": 1e-3,
    "mass": 500.0,
    "stiffness": 5e4,
    "damping": 300.0,
    "x1_initial": 0.01,
    "v1_initial": 0.01,
    "noise_var": 1e-4,
    "q_scale": 1e-8,
    "state_var": 1e-6,
    "k4_initial": 30000.0,
    "k4_reference": 50000.0,
    "k4_variance": 0.04,
    "ukf_gamma": 0,
    "integrator": IntegratorKind.EULER.value,
    "schedule": ScheduleKind.JACOBI.value,
    "inner_iterations": 1,
}

CHAIN4_GROUPS = ((0, 1), (2, 3))
CHAIN4_MEASURED = (0, 3)
CHAIN4_CALIBRATION = (1, 2)


def _chain4(p, unknown: bool = True, measured: bool = True, integrator: Optional[IntegratorKind] = None):
    spec = ()
    if unknown:
        spec = (chain.UnknownParam("k", 3, p["k4_initial"], p["k4_variance"], p["k4_reference"]),)
    params = chain.ChainParams.uniform(4, p["mass"], p["stiffness"], p["damping"], unknown=spec)
    variances = {dof: p["noise_var"] for dof in CHAIN4_MEASURED} if measured else {}
    system = chain.build_chain(
        params,
        groups=CHAIN4_GROUPS,
        measured=variances,
        dt=p["dt"],
        integrator=integrator or IntegratorKind(p["integrator"]),
        q_scale=p["q_scale"],
    )
    return system, variances


def _run_chain4_forward(ctx: ScenarioContext) -> ExperimentReport:
    """Deterministic co-simulation under each coupling schedule against the monolithic Heun reference."""
    p = ctx.params
    system, _ = _chain4(p, unknown=False, measured=False, integrator=IntegratorKind.HEUN)
    x0, v0 = _initial_conditions(4, p["x1_initial"], p["v1_initial"])
    truth, _ = chain.simulate_truth(system.params, x0, v0, p["horizon"], p["dt"])
    report = ctx.report()
    reference = {f"x{dof + 1}": truth.displacement[:, dof] for dof in range(4)}
    report.add_trajectory("reference", truth.times, reference)
    medians = {}
    for method in p["schedules"]:
        if method not in CHOICES["schedule"]:
            raise ConfigInvalid(f"Unknown schedule '{method}' in 'schedules'")
        graph = chain.chain_graph(system, x0, v0, EstimatorKind.DETERMINISTIC)
        trace = run_schedule(graph, ctx.schedule(kind=method))
        estimate = _chain_estimate(system, trace)
        error = np.abs(estimate.x - truth.displacement)
        metrics = MetricReport(method, wall_clock=trace.wall_clock)
        for dof in range(4):
            metrics.add_accuracy(f"x{dof + 1}", estimate.x[1:, dof], truth.displacement[1:, dof])
        medians[method] = np.median(error[1:], axis=0)
        metrics.extra["median_abs_error"] = medians[method].tolist()
        metrics.extra["max_abs_error"] = float(error.max())
        report.metrics.append(metrics)
        columns = {}
        for dof in range(4):
            columns[f"x{dof + 1}"] = estimate.x[:, dof]
            columns[f"x{dof + 1}_error"] = error[:, dof]
        report.add_trajectory(method, truth.times, columns)
    if ScheduleKind.JACOBI.value in medians:
        jacobi = medians[ScheduleKind.JACOBI.value]
        report.summary["jacobi_lowest_error"] = bool(all(np.all(jacobi <= other) for other in medians.values()))
    return report


def _run_chain4_inverse(ctx: ScenarioContext, methods: Sequence[str]) -> ExperimentReport:
    p = ctx.params
    system, variances = _chain4(p)
    x0, v0 = _initial_conditions(4, p["x1_initial"], p["v1_initial"])
    report, per_method, *_ = _chain_study(ctx, system, x0, v0, variances, methods, CHAIN4_CALIBRATION)
    if "jacobi_det" in per_method and "jacobi_prob" in per_method:
        det = [r.coverage["0.95"] for r in per_method["jacobi_det"]]
        prob = [r.coverage["0.95"] for r in per_method["jacobi_prob"]]
        report.summary["probabilistic_coverage_wins"] = int(sum(b > a for a, b in zip(det, prob)))
        report.summary["replicates"] = len(det)
    if "jacobi_det" in per_method and "centralized" in per_method:
        distributed = report.metric("jacobi_det").rmse["x"]
        centralized = report.metric("centralized").rmse["x"]
        report.summary["distributed_to_centralized_rmse"] = distributed / centralized if centralized > 0 else None
    return report


def _learn_interface_law(ctx: ScenarioContext, system: chain.ChainSystem, x0, v0):
    """
    Fit the interface law from a separate training simulation, or load one.

    The training record uses its own noise stream so the learned law is
    independent of the evaluation measurements.
    """
    p = ctx.params
    if p["law_file"]:
        try:
            return LearnedLaw.load(p["law_file"]), None
        except OSError as e:
            raise ConfigInvalid(f"Cannot read learned law '{p['law_file']}': {e}") from e
    spring = system.interface_springs[0]
    a, b = spring - 1, spring
    variances = {a: p["noise_var"], b: p["noise_var"]}
    truth, records = chain.simulate_truth(
        system.params, x0, v0, p["training_horizon"], p["dt"], variances, ctx.rng(0, SINDY_SEED_OFFSET)
    )
    config = SindyConfig(
        threshold=p["sindy_threshold"],
        highpass_cutoff=p["highpass_cutoff"],
        dt=p["dt"],
        trim_seconds=p["trim_seconds"],
    )
    fit = fit_interface_law(records[a], records[b], truth.interface_force(system.params, spring)[1:], config)
    if p["save_law"]:
        try:
            fit.law.save(p["save_law"])
        except OSError as e:
            raise IoError(f"Cannot write learned law '{p['save_law']}': {e}") from e
    return fit.law, fit


def _run_chain4_learned(ctx: ScenarioContext) -> ExperimentReport:
    p = ctx.params
    system, variances = _chain4(p)
    x0, v0 = _initial_conditions(4, p["x1_initial"], p["v1_initial"])
    law, fit = _learn_interface_law(ctx, system, x0, v0)
    spring = system.interface_springs[0]
    report, *_ = _chain_study(
        ctx, system, x0, v0, variances, ("jacobi_learned",), CHAIN4_CALIBRATION, learned={spring: law}
    )
    k_true, c_true = float(system.params.stiffness[spring]), float(system.params.damping[spring])
    report.summary["learned_law"] = law.to_dict()
    report.summary["stiffness_relative_error"] = abs(law.stiffness - k_true) / k_true
    report.summary["damping_relative_error"] = abs(law.damping - c_true) / c_true
    if fit is not None:
        report.summary["residual_rms"] = fit.residual_rms
    return report


CHAIN6_DEFAULTS = {
    "horizon": 10.0,
    "dt": 2e-3,
    "mass": 500.0,
    "added_mass": 100.0,
    "stiffness": 5e4,
    "damping": 300.0,
    "force_amplitude": 500.0,
    "force_frequency": 2.0,
    "noise_var": 1e-3,
    "noise_var_center": 1e-2,
    "guess_ratio": 0.7,
    "param_variance": 0.04,
    "q_scale": 1e-8,
    "state_var": 1e-6,
    "ukf_gamma": 0,
    "integrator": IntegratorKind.EULER.value,
    "schedule": ScheduleKind.JACOBI.value,
    "inner_iterations": 1,
}

CHAIN6_GROUPS = ((0, 1), (2, 3), (4, 5))
CHAIN6_NAMES = ("V1", "V3", "V2")
CHAIN6_UNKNOWN = (("k", 1), ("c", 1), ("m", 2), ("k", 3), ("c", 3), ("k", 5), ("c", 5))
CHAIN6_CALIBRATION = (5,)


def _harmonic_force(t: float, n_dof: int, dof: int, amplitude: float, frequency: float) -> np.ndarray:
    force = np.zeros(n_dof)
    force[dof] = amplitude * np.sin(2.0 * np.pi * frequency * t)
    return force


def _chain6(p):
    """
    Six masses in three subsystems; the centre one carries an added mass on
    its first DOF, the external force acts on its second.
    """
    masses = np.full(6, p["mass"])
    masses[2] += p["added_mass"]
    stiffness, damping = np.full(6, p["stiffness"]), np.full(6, p["damping"])
    values = {"m": masses, "k": stiffness, "c": damping}
    unknown = tuple(
        chain.UnknownParam(kind, index, p["guess_ratio"] * values[kind][index], p["param_variance"])
        for kind, index in CHAIN6_UNKNOWN
    )
    forcing = partial(_harmonic_force, n_dof=6, dof=3, amplitude=p["force_amplitude"], frequency=p["force_frequency"])
    params = chain.ChainParams(masses, stiffness, damping, forcing, unknown)
    variances = {1: p["noise_var"], 2: p["noise_var_center"], 3: p["noise_var_center"], 4: p["noise_var"]}
    system = chain.build_chain(
        params,
        groups=CHAIN6_GROUPS,
        measured=variances,
        dt=p["dt"],
        integrator=IntegratorKind(p["integrator"]),
        q_scale=p["q_scale"],
        names=CHAIN6_NAMES,
    )
    return system, variances


def _run_chain6_inverse(ctx: ScenarioContext) -> ExperimentReport:
    system, variances = _chain6(ctx.params)
    x0, v0 = np.zeros(6), np.zeros(6)
    report, *_ = _chain_study(ctx, system, x0, v0, variances, ("jacobi_det", "centralized"), CHAIN6_CALIBRATION)
    return report


def baseline_acceleration(system: chain.ChainSystem, name: str, dof: int, trace: RunTrace, forcing: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Acceleration of ``dof`` from the derivative map of subsystem ``name``,
    evaluated at its posterior mean with the recorded interface messages and
    the external forcing as inputs.

    Messages are recorded once per step from the start-of-step register, so
    row ``n`` pairs with the posterior mean at step ``n``; the final row
    repeats the last evaluated value.
    """
    sub = system.subsystem(name)
    means = trace.means[name]
    n_steps = means.shape[0] - 1
    u = np.zeros((n_steps, sub.n_local))
    if forcing is not None:
        u += forcing[:n_steps][:, list(sub.dofs)]
    for edge in system.edges:
        if edge.receiver == name:
            u[:, list(edge.target_indices)] += trace.messages[edge.key]
    row = sub.n_local + sub.x_index(dof)
    accel = np.array([sub.model.transition(means[n], u[n])[row] for n in range(n_steps)])
    return np.append(accel, accel[-1] if n_steps else 0.0)


def _run_chain6_diffusion(ctx: ScenarioContext) -> ExperimentReport:
    """
    Sensitivity screening of local edits in V3, reusing the interface forces
    of one distributed estimation run.
    """
    p = ctx.params
    system, variances = _chain6(p)
    x0, v0 = np.zeros(6), np.zeros(6)
    report, _, truth, estimates, traces = _chain_study(
        ctx, system, x0, v0, variances, ("jacobi_det",), CHAIN6_CALIBRATION
    )
    estimate, trace = estimates["jacobi_det"], traces["jacobi_det"]
    left, right = system.edges[0].label, system.edges[2].label
    e13 = trace.messages[("V1", "V3", left)][:, 0]
    e23 = trace.messages[("V3", "V2", right)][:, 0]

    k_star = float(estimate.params["k4"][1][-1])
    m_star = max(float(estimate.params["m3"][1][-1]) - p["mass"], 0.0)
    accel3 = baseline_acceleration(system, "V3", 2, trace, truth.forcing)
    defects = {
        "stiffness": DefectSignal.from_force("V3", defect_force_stiffness(k_star, estimate.x[:, 2], estimate.x[:, 3])),
        "mass": DefectSignal.from_force("V3", defect_force_mass(m_star, accel3)),
    }
    sigma_x1 = np.sqrt(np.clip(estimate.x_var[:, 0], 0.0, None))
    sigma_x6 = np.sqrt(np.clip(estimate.x_var[:, 5], 0.0, None))

    one_hop_seconds = heat_seconds = 0.0
    for name, defect in defects.items():
        tic = time.perf_counter()
        affinities = edge_weights_from_rms({("V1", "V3"): e13, ("V3", "V2"): e23})
        _, neighbours = one_hop_scores(defect.magnitude, p["leakage"], affinities.eta["V3"])
        hop_x1 = sensitivity_envelope(estimate.x[:, 0], neighbours["V1"], sigma_x1)
        hop_x6 = sensitivity_envelope(estimate.x[:, 5], neighbours["V2"], sigma_x6)
        one_hop_seconds += time.perf_counter() - tic

        tic = time.perf_counter()
        affinities = edge_weights_from_rms({("V1", "V3"): e13, ("V3", "V2"): e23})
        graph = DiffusionGraph.from_weights(CHAIN6_NAMES, affinities.weights)
        sources = np.zeros((defect.magnitude.shape[0], graph.n_nodes))
        sources[:, graph.index("V3")] = defect.magnitude
        scores = heat_kernel_scores(graph, p["beta"], sources)
        heat_x1 = sensitivity_envelope(estimate.x[:, 0], scores[:, graph.index("V1")], sigma_x1)
        heat_x6 = sensitivity_envelope(estimate.x[:, 5], scores[:, graph.index("V2")], sigma_x6)
        heat_seconds += time.perf_counter() - tic

        report.add_trajectory(f"envelope_{name}", truth.times, {
            "x1": estimate.x[:, 0],
            "x1_one_hop_lower": hop_x1[0],
            "x1_one_hop_upper": hop_x1[1],
            "x1_heat_lower": heat_x1[0],
            "x1_heat_upper": heat_x1[1],
            "x6": estimate.x[:, 5],
            "x6_one_hop_lower": hop_x6[0],
            "x6_one_hop_upper": hop_x6[1],
            "x6_heat_lower": heat_x6[0],
            "x6_heat_upper": heat_x6[1],
        })
        report.summary[f"{name}_defect_rms"] = float(np.sqrt(np.mean(defect.magnitude ** 2)))

    baseline = trace.wall_clock
    report.summary["edge_weights"] = {f"{u}-{v}": w for (u, v), w in affinities.weights.items()}
    report.summary["baseline_seconds"] = baseline
    report.summary["one_hop_seconds"] = one_hop_seconds
    report.summary["heat_kernel_seconds"] = heat_seconds
    report.summary["one_hop_speedup"] = baseline / one_hop_seconds if one_hop_seconds > 0 else None
    report.summary["heat_kernel_speedup"] = baseline / heat_seconds if heat_seconds > 0 else None
    logger.info(f"Sensitivity pass: one-hop {one_hop_seconds:.3g} s, heat kernel {heat_seconds:.3g} s, baseline {baseline:.3g} s")
    return report


CHAIN_SCALING_DEFAULTS = {
    "sizes": [8, 16, 32, 64],
    "repeats": 3,
    "horizon": 0.5,
    "dt": 1e-3,
    "mass": 500.0,
    "stiffness": 5e4,
    "damping": 300.0,
    "x1_initial": 0.01,
    "v1_initial": 0.01,
    "noise_var": 1e-4,
    "guess_ratio": 0.6,
    "param_variance": 0.04,
    "q_scale": 1e-8,
    "state_var": 1e-6,
    "ukf_gamma": 0,
    "integrator": IntegratorKind.EULER.value,
    "schedule": ScheduleKind.JACOBI.value,
    "inner_iterations": 1,
}


def scaling_chain(n_dof: int, p) -> Tuple[chain.ChainSystem, Dict[int, float]]:
    """
    Chain of two-mass subsystems for the runtime study.

    The first subsystem has known parameters; every further subsystem
    estimates its internal stiffness. Each subsystem measures the
    acceleration of its second mass.
    """
    if n_dof < 4 or n_dof % 2:
        raise ConfigInvalid(f"Scaling chains need an even number of DOFs >= 4, got {n_dof}")
    unknown = tuple(
        chain.UnknownParam("k", lo + 1, p["guess_ratio"] * p["stiffness"], p["param_variance"])
        for lo in range(2, n_dof, 2)
    )
    params = chain.ChainParams.uniform(n_dof, p["mass"], p["stiffness"], p["damping"], unknown=unknown)
    variances = {lo + 1: p["noise_var"] for lo in range(0, n_dof, 2)}
    system = chain.build_chain(
        params, measured=variances, dt=p["dt"], integrator=IntegratorKind(p["integrator"]), q_scale=p["q_scale"]
    )
    return system, variances


def _scaling_report(ctx: ScenarioContext, sizes: Sequence[int], runners, index: str) -> ExperimentReport:
    report = ctx.report()
    result = scaling_study(sizes, runners, repeats=ctx.params["repeats"])
    for method in runners:
        metrics = MetricReport(method, wall_clock=float(sum(result.timings[method])))
        metrics.extra["slope"] = result.slopes[method]
        metrics.extra["timings"] = list(result.timings[method])
        report.metrics.append(metrics)
    report.add_trajectory("scaling", result.sizes, {f"{m}_seconds": result.timings[m] for m in runners}, index=index)
    report.summary["scaling"] = result.to_dict()
    if "distributed" in result.slopes and "centralized" in result.slopes:
        report.summary["slope_gap"] = result.slopes["centralized"] - result.slopes["distributed"]
    return report


def _run_chain_scaling(ctx: ScenarioContext) -> ExperimentReport:
    p = ctx.params
    prepared = {}
    for n_dof in p["sizes"]:
        system, variances = scaling_chain(int(n_dof), p)
        x0, v0 = _initial_conditions(system.params.n_dof, p["x1_initial"], p["v1_initial"])
        truth, records = chain.simulate_truth(system.params, x0, v0, p["horizon"], p["dt"], variances, ctx.rng(0))
        prepared[int(n_dof)] = (system, x0, v0, system.channels(records))

    def runner(method: str, n_dof: int):
        system, x0, v0, channels = prepared[n_dof]
        graph = _chain_graph(method, system, x0, v0, p)
        return run_schedule(graph, ctx.schedule(), channels)

    runners = {"distributed": partial(runner, "jacobi_det"), "centralized": partial(runner, "centralized")}
    return _scaling_report(ctx, list(prepared), runners, "n_dof")


HIERARCHY_DEFAULTS = {
    "horizon": 2.0,
    "dt": 1e-3,
    "mass": 500.0,
    "stiffness": 5e4,
    "damping": 300.0,
    "x1_initial": 0.01,
    "v1_initial": 0.0,
    "schedule": ScheduleKind.JACOBI.value,
    "inner_iterations": 1,
}


def hierarchy_graphs(p) -> Tuple[chain.ChainSystem, SystemGraph, SystemGraph]:
    """
    The same three-mass chain as a flat three-node graph and as a two-node
    graph whose second node embeds a two-node subgraph.

    Returns:
        Tuple (flat system, flat graph, embedded graph)
    """
    params = chain.ChainParams.uniform(3, p["mass"], p["stiffness"], p["damping"])
    x0, v0 = _initial_conditions(3, p["x1_initial"], p["v1_initial"])
    flat_system = chain.build_chain(params, groups=((0,), (1,), (2,)), dt=p["dt"], names=("A", "B", "C"))
    outer_system = chain.build_chain(params, groups=((0,), (1, 2)), dt=p["dt"], names=("A", "X"))
    deterministic = EstimatorKind.DETERMINISTIC
    flat = chain.chain_graph(flat_system, x0, v0, deterministic)
    outer = chain.chain_graph(outer_system, x0, v0, deterministic)
    inner = chain.chain_graph(flat_system, x0, v0, deterministic, include=("B", "C"))
    boundary = outer_system.subsystem("X")
    inner_b = flat_system.subsystem("B")
    port = BoundaryPort(
        outer_selector=boundary.interface_selector(1),
        inner_node="B",
        state_map={boundary.x_index(1): inner_b.x_index(1), boundary.v_index(1): inner_b.v_index(1)},
        input_map={boundary.x_index(1): inner_b.x_index(1)},
    )
    return flat_system, flat, embed_subgraph(outer, "X", inner, [port])


def _run_hierarchy_toy(ctx: ScenarioContext) -> ExperimentReport:
    p = ctx.params
    system, flat, embedded = hierarchy_graphs(p)
    x0, v0 = _initial_conditions(3, p["x1_initial"], p["v1_initial"])
    truth, _ = chain.simulate_truth(system.params, x0, v0, p["horizon"], p["dt"])
    report = ctx.report()
    node_ids = {"flat": {}, "embedded": {"B": "X/B", "C": "X/C"}}
    estimates = {}
    for method, graph in (("flat", flat), ("embedded", embedded)):
        trace = run_schedule(graph, ctx.schedule())
        estimate = _chain_estimate(system, trace, node_ids[method])
        metrics = MetricReport(method, wall_clock=trace.wall_clock)
        metrics.add_accuracy("x", estimate.x[1:], truth.displacement[1:])
        metrics.add_accuracy("v", estimate.v[1:], truth.velocity[1:])
        metrics.extra["nodes"] = list(graph.node_ids)
        report.metrics.append(metrics)
        report.add_trajectory(method, truth.times, _chain_columns(system, truth, estimate))
        estimates[method] = estimate
    difference = max(
        float(np.max(np.abs(estimates["flat"].x - estimates["embedded"].x))),
        float(np.max(np.abs(estimates["flat"].v - estimates["embedded"].v))),
    )
    report.summary["max_abs_difference"] = difference
    report.summary["embedded_edges"] = [edge.name for edge in embedded.edges]
    return report


# -- Kuramoto power grids --------------------------------------------------


GRID_DEFAULTS = {
    "horizon": 3.0,
    "dt": 0.01,
    "sigma": 0.02,
    "coupling": grid.CouplingMode.MAGNITUDE.value,
    "order": grid.KuramotoOrder.SECOND.value,
    "init_var": 0.04,
    "s_max": 5,
    "sweeps": 1,
    "adaptive_q": False,
    "omega_clip": None,
    "p0_theta": 0.25,
    "p0_omega": 0.25,
    "p0_natural": 1.0,
    "q_state": 1e-4,
    "q_natural_central": 1e-4,
    "q_natural_distributed": 1e-9,
    "ukf_gamma": 1,
}

GRID_METHODS = {
    "centralized": ("centralized_ukf",),
    "distributed": ("centralized_ukf", "distributed_ukf"),
    "wls": ("centralized_wls", "distributed_wls"),
    "wnls": ("centralized_wnls", "distributed_wnls"),
}


def grid_options(p) -> grid.GridEstimatorOptions:
    return grid.GridEstimatorOptions(
        sigma=p["sigma"],
        p0_theta=p["p0_theta"],
        p0_omega=p["p0_omega"],
        p0_natural=p["p0_natural"],
        q_state=p["q_state"],
        q_natural_central=p["q_natural_central"],
        q_natural_distributed=p["q_natural_distributed"],
        adaptive_q=p["adaptive_q"],
        omega_clip=p["omega_clip"],
        sweeps=p["sweeps"],
        ukf_params=UkfParams.from_gamma(p["ukf_gamma"]),
    )


def grid_partition(case: GridCase, p) -> Partition:
    coupling = np.abs(grid.coupling_from_ybus(case, grid.CouplingMode(p["coupling"])))
    return partition_generator_seeded(coupling, case.generator_buses, PartitionConfig(s_max=p["s_max"]))


def _grid_run(ctx, method, model, partition, truth, theta_hat, omega_hat, options, horizon=None):
    layout, _, estimator = method.partition("_")
    kind = EstimatorKind(estimator)
    dt = ctx.params["dt"]
    if layout == "centralized":
        graph = grid.centralized_graph(model, theta_hat, omega_hat, kind, options, dt)
        used = None
    else:
        graph = grid.distributed_graph(model, partition, theta_hat, omega_hat, kind, options, dt)
        used = partition
    channels = grid.measurement_channels(model, truth.measurements, used)
    config = ScheduleConfig(
        ScheduleKind.JACOBI,
        inner_iterations=options.sweeps,
        horizon=ctx.params["horizon"] if horizon is None else horizon,
        dt=dt,
        threads=ctx.config.threads,
    )
    trace = run_schedule(graph, config, channels)
    return trace, grid.assemble_estimates(model, trace, used)


def _grid_metrics(method: str, model: grid.KuramotoModel, truth: grid.GridTruth, estimates, trace) -> MetricReport:
    report = MetricReport(method, wall_clock=trace.wall_clock)
    theta_true = truth.theta[1:]
    theta = theta_true + grid.wrap_angle(estimates["theta"][1:] - theta_true)
    report.add_accuracy("theta", theta, theta_true)
    if model.second_order:
        report.add_accuracy("omega", estimates["omega"][1:], truth.omega[1:])
    if "natural" in estimates:
        natural_true = np.tile(model.natural, (theta_true.shape[0], 1))
        report.add_accuracy("natural", estimates["natural"][1:], natural_true)
        report.add_calibration(natural_true, estimates["natural"][1:], estimates["natural_var"][1:])
        report.extra["theta_coverage_0.95"] = coverage(theta_true, theta, estimates["theta_var"][1:], 0.95)
        report.extra["natural_final_rmse"] = float(np.sqrt(np.mean((estimates["natural"][-1] - model.natural) ** 2)))
    return report


def _grid_columns(case: GridCase, model: grid.KuramotoModel, truth: grid.GridTruth, estimates) -> Dict[str, np.ndarray]:
    columns = {}
    truths = {"theta": truth.theta, "omega": truth.omega if model.second_order else None}
    for i, bus in enumerate(case.bus_ids):
        for key in ("theta", "omega", "natural"):
            if key not in estimates:
                continue
            if key == "natural":
                columns[f"{key}{bus}_true"] = np.full(truth.times.shape[0], model.natural[i])
            else:
                columns[f"{key}{bus}_true"] = truths[key][:, i]
            columns[f"{key}{bus}"] = estimates[key][:, i]
            columns[f"{key}{bus}_std"] = np.sqrt(np.clip(estimates[f"{key}_var"][:, i], 0.0, None))
    return columns


def _run_grid(ctx: ScenarioContext, methods: Sequence[str]) -> ExperimentReport:
    p = ctx.params
    case = load_matpower_case(p["case"])
    mode, order = grid.CouplingMode(p["coupling"]), grid.KuramotoOrder(p["order"])
    options = grid_options(p)
    partition = grid_partition(case, p)
    report = ctx.report()
    report.data_hashes[case.name] = case.sha256
    per_method: Dict[str, List[MetricReport]] = {method: [] for method in methods}
    for replicate in range(ctx.config.replicates):
        rng = ctx.rng(replicate)
        model = grid.build_kuramoto(case, mode, order, rng)
        truth = grid.simulate_truth(model, p["horizon"], p["dt"], p["sigma"], rng)
        theta_hat, omega_hat = grid.initial_estimate(model, rng, p["init_var"])
        for method in methods:
            trace, estimates = _grid_run(ctx, method, model, partition, truth, theta_hat, omega_hat, options)
            per_method[method].append(_grid_metrics(method, model, truth, estimates, trace))
            if replicate == 0:
                report.add_trajectory(method, truth.times, _grid_columns(case, model, truth, estimates))
    for method in methods:
        report.metrics.append(_aggregate(method, per_method[method]))
    report.summary["case"] = case.to_dict()
    report.summary["partition"] = partition.to_dict()
    return report


GRID_SCALING_DEFAULTS = {
    **GRID_DEFAULTS,
    "case": "case9",
    "copies": [1, 2, 4, 8],
    "repeats": 3,
    "horizon": 0.5,
}


def _run_grid_scaling(ctx: ScenarioContext) -> ExperimentReport:
    p = ctx.params
    base = load_matpower_case(p["case"])
    mode, order = grid.CouplingMode(p["coupling"]), grid.KuramotoOrder(p["order"])
    options = grid_options(p)
    prepared = {}
    for copies in p["copies"]:
        case = grid.tile_case(base, int(copies))
        rng = ctx.rng(0)
        model = grid.build_kuramoto(case, mode, order, rng)
        truth = grid.simulate_truth(model, p["horizon"], p["dt"], p["sigma"], rng)
        theta_hat, omega_hat = grid.initial_estimate(model, rng, p["init_var"])
        prepared[case.n_bus] = (model, grid_partition(case, p), truth, theta_hat, omega_hat)

    def runner(method: str, n_bus: int):
        model, partition, truth, theta_hat, omega_hat = prepared[n_bus]
        return _grid_run(ctx, method, model, partition, truth, theta_hat, omega_hat, options)

    runners = {"distributed": partial(runner, "distributed_ukf"), "centralized": partial(runner, "centralized_ukf")}
    report = _scaling_report(ctx, list(prepared), runners, "n_bus")
    report.data_hashes[base.name] = base.sha256
    return report


# -- registry --------------------------------------------------------------


def _registry() -> Dict[str, Scenario]:
    learned_defaults = {
        **CHAIN4_DEFAULTS,
        "training_horizon": 10.0,
        "sindy_threshold": 1.0,
        "highpass_cutoff": 0.05,
        "trim_seconds": 1.0,
        "law_file": "",
        "save_law": "",
    }
    scenarios = [
        Scenario(
            "chain4-forward",
            "4-DOF chain co-simulation: Jacobi, Gauss-Seidel and AB2 against the monolithic Heun reference",
            _run_chain4_forward,
            {**CHAIN4_DEFAULTS, "schedules": [kind.value for kind in ScheduleKind]},
        ),
        Scenario(
            "chain4-inverse-det",
            "4-DOF joint state and k4 estimation: deterministic Jacobi UKFs against a centralised UKF",
            partial(_run_chain4_inverse, methods=("jacobi_det", "centralized")),
            CHAIN4_DEFAULTS,
        ),
        Scenario(
            "chain4-inverse-prob",
            "4-DOF calibration: probabilistic against deterministic interface messages",
            partial(_run_chain4_inverse, methods=("jacobi_det", "jacobi_prob")),
            CHAIN4_DEFAULTS,
        ),
        Scenario(
            "chain4-inverse-learned",
            "4-DOF probabilistic Jacobi with a sparse-regression interface law",
            _run_chain4_learned,
            learned_defaults,
        ),
        Scenario(
            "chain4-centralized",
            "4-DOF joint state and k4 estimation with a single centralised UKF",
            partial(_run_chain4_inverse, methods=("centralized",)),
            CHAIN4_DEFAULTS,
        ),
        Scenario(
            "chain6-inverse",
            "6-DOF chain, three subsystems, seven unknown parameters under sparse sensing",
            _run_chain6_inverse,
            CHAIN6_DEFAULTS,
        ),
        Scenario(
            "chain6-diffusion",
            "6-DOF sensitivity envelopes from diffusing V3 defect forces over the subsystem graph",
            _run_chain6_diffusion,
            {**CHAIN6_DEFAULTS, "leakage": DEFAULT_LEAKAGE, "beta": DEFAULT_BETA},
        ),
        Scenario(
            "chain-scaling",
            "Runtime of distributed against centralised estimation on 8 to 64 DOF chains",
            _run_chain_scaling,
            CHAIN_SCALING_DEFAULTS,
        ),
        Scenario(
            "grid-scaling",
            "Runtime of distributed against centralised estimation on tiled IEEE networks",
            _run_grid_scaling,
            GRID_SCALING_DEFAULTS,
        ),
        Scenario(
            "hierarchy-toy",
            "Flat and hierarchically embedded graphs of one 3-mass chain under the same schedule",
            _run_hierarchy_toy,
            HIERARCHY_DEFAULTS,
        ),
    ]
    for case in ("case9", "case14"):
        for variant, methods in GRID_METHODS.items():
            scenarios.append(Scenario(
                f"grid-{case}-{variant}",
                f"Kuramoto joint phase and natural-frequency estimation on {case}: {', '.join(methods)}",
                partial(_run_grid, methods=methods),
                {**GRID_DEFAULTS, "case": case},
            ))
    return {scenario.name: scenario for scenario in scenarios}


SCENARIOS = _registry()


def list_scenarios() -> List[Scenario]:
    return [SCENARIOS[name] for name in sorted(SCENARIOS)]


def get_scenario(name: str) -> Scenario:
    try:
        return SCENARIOS[name]
    except KeyError:
        logger.error(f"Unknown scenario '{name}'")
        raise UnknownScenario(name, SCENARIOS) from None


def validate_config(config: RunConfig) -> Dict[str, Any]:
    """
    Check a configuration without running it.

    Returns:
        The fully resolved scenario parameters

    Raises:
        UnknownScenario: If the scenario is not registered
        ConfigInvalid: If a parameter is unknown or mistyped
    """
    return resolve_params(get_scenario(config.scenario), config.params)


def run_scenario(config: RunConfig) -> ExperimentReport:
    """
    Run one registered scenario.

    Args:
        config: Run configuration

    Returns:
        Report with per-method metrics, trajectories, data hashes and summary

    Raises:
        UnknownScenario: If the scenario is not registered
        ConfigInvalid: If the parameters are invalid
        CompositionalInferenceError: Any run failure, prefixed with the scenario name
    """
    scenario = get_scenario(config.scenario)
    ctx = ScenarioContext(scenario, config, resolve_params(scenario, config.params))
    logger.info(f"Running '{scenario.name}' with seed {config.seed} and {config.replicates} replicate(s)")
    tic = time.perf_counter()
    try:
        report = scenario.runner(ctx)
    except CompositionalInferenceError as e:
        logger.error(f"Scenario '{scenario.name}' failed: {e}")
        e.args = (f"Scenario '{scenario.name}': {e}",)
        raise
    logger.info(f"Scenario '{scenario.name}' finished in {time.perf_counter() - tic:.3g} s")
    return report
