import numpy as np
import pytest

from compositional_inference.estimators import EstimatorKind
from compositional_inference.exceptions import InvalidParams
from compositional_inference.numerics import make_rng
from compositional_inference.schedules import ScheduleConfig, run_schedule
from compositional_inference.testbeds.grid import (
    CENTRAL,
    NATURAL_FREQUENCIES,
    CouplingMode,
    GridEstimatorOptions,
    KuramotoOrder,
    assemble_estimates,
    build_kuramoto,
    centralized_graph,
    cluster_layout,
    coupling_from_ybus,
    distributed_graph,
    initial_estimate,
    measurement_channels,
    simulate_truth,
    wrap_angle,
)
from compositional_inference.testbeds.matpower import load_matpower_case
from compositional_inference.testbeds.partition import partition_generator_seeded


@pytest.fixture(scope="module")
def case9():
    return load_matpower_case("case9")


def setup_network(case, order=KuramotoOrder.SECOND, seed=42):
    rng = make_rng(seed)
    model = build_kuramoto(case, CouplingMode.MAGNITUDE, order, rng)
    truth = simulate_truth(model, horizon=0.5, dt=0.01, sigma=0.02, rng=rng)
    theta_hat, omega_hat = initial_estimate(model, rng)
    return model, truth, theta_hat, omega_hat


def theta_rmse(estimate, truth):
    return float(np.sqrt(np.mean(wrap_angle(estimate - truth) ** 2)))


class TestWrapAngle:
    """Test angle wrapping."""

    def test_interval(self):
        """Test the (−π, π] convention."""
        np.testing.assert_allclose(wrap_angle([np.pi, -np.pi, 1.5 * np.pi, 0.3]), [np.pi, np.pi, -0.5 * np.pi, 0.3])


class TestKuramotoModel:
    """Test network construction and simulation."""

    def test_coupling(self, case9):
        """Test that coupling is symmetric with a zero diagonal."""
        k = coupling_from_ybus(case9, CouplingMode.MAGNITUDE)
        np.testing.assert_allclose(k, k.T)
        np.testing.assert_array_equal(np.diag(k), 0.0)
        assert k[0, 3] == pytest.approx(1.0 / 0.0576)
        susceptance = coupling_from_ybus(case9, CouplingMode.SUSCEPTANCE)
        assert susceptance[0, 3] == pytest.approx(1.0 / 0.0576)

    def test_parameter_ranges(self, case9):
        """Test the drawn damping, natural frequencies and initial state."""
        model = build_kuramoto(case9, rng=make_rng(0))
        assert np.all((model.damping >= 0.1) & (model.damping <= 0.3))
        assert set(np.round(model.natural, 1)) <= set(NATURAL_FREQUENCIES)
        assert np.all(np.abs(model.theta0) <= 0.5)
        assert np.all(np.abs(model.omega0) <= 0.2)

    def test_rng_required(self, case9):
        """Test that parameters cannot be drawn without a generator."""
        with pytest.raises(InvalidParams):
            build_kuramoto(case9)

    def test_same_seed_same_network(self, case9):
        """Test reproducible draws."""
        a = build_kuramoto(case9, rng=make_rng(3))
        b = build_kuramoto(case9, rng=make_rng(3))
        np.testing.assert_array_equal(a.natural, b.natural)
        np.testing.assert_array_equal(a.theta0, b.theta0)

    def test_truth_shapes(self, case9):
        """Test trajectory and measurement shapes for both orders."""
        _, truth, _, _ = setup_network(case9)
        assert truth.theta.shape == (51, 9)
        assert truth.measurements.shape == (50, 18)
        assert np.all(np.abs(truth.theta) <= np.pi)
        _, first, _, _ = setup_network(case9, KuramotoOrder.FIRST)
        assert first.measurements.shape == (50, 9)
        assert first.omega.shape == (51, 9)


class TestGridGraphs:
    """Test centralized and distributed grid estimators."""

    def test_cluster_layout(self, case9):
        """Test cluster names and external buses."""
        model, _, _, _ = setup_network(case9)
        partition = partition_generator_seeded(model.coupling, case9.generator_buses)
        clusters = cluster_layout(model, partition)
        assert [c.name for c in clusters] == ["C1", "C2", "C3"]
        for cluster in clusters:
            assert not set(cluster.external) & set(cluster.buses)
            assert 0.0 < cluster.external_ratio < 1.0

    def test_distributed_structure(self, case9):
        """Test relay edges and measurement channels."""
        model, truth, theta_hat, omega_hat = setup_network(case9)
        partition = partition_generator_seeded(model.coupling, case9.generator_buses)
        graph = distributed_graph(model, partition, theta_hat, omega_hat)
        assert graph.node_ids == ("C1", "C2", "C3")
        assert all(edge.label == "theta" for edge in graph.edges)
        channels = measurement_channels(model, truth.measurements, partition)
        for i, members in enumerate(partition.clusters):
            assert channels[f"C{i + 1}"].shape == (50, 2 * len(members))
        assert channels[CENTRAL].shape == (50, 18)

    def test_centralized_ukf_converges(self, case9):
        """Test that the centralized UKF reduces the phase error."""
        model, truth, theta_hat, omega_hat = setup_network(case9)
        graph = centralized_graph(model, theta_hat, omega_hat)
        trace = run_schedule(graph, ScheduleConfig(horizon=0.5, dt=0.01), measurement_channels(model, truth.measurements))
        estimates = assemble_estimates(model, trace)
        assert set(estimates) == {"theta", "theta_var", "omega", "omega_var", "natural", "natural_var"}
        assert theta_rmse(estimates["theta"][-1], truth.theta[-1]) < theta_rmse(theta_hat, truth.theta[0])
        assert theta_rmse(estimates["theta"][-1], truth.theta[-1]) < 0.1

    def test_distributed_ukf_tracks(self, case9):
        """Test that the distributed UKF tracks the phases."""
        model, truth, theta_hat, omega_hat = setup_network(case9)
        partition = partition_generator_seeded(model.coupling, case9.generator_buses)
        graph = distributed_graph(model, partition, theta_hat, omega_hat)
        channels = measurement_channels(model, truth.measurements, partition)
        trace = run_schedule(graph, ScheduleConfig(horizon=0.5, dt=0.01), channels)
        estimates = assemble_estimates(model, trace, partition)
        assert estimates["theta"].shape == (51, 9)
        assert theta_rmse(estimates["theta"][-1], truth.theta[-1]) < 0.1

    def test_wls_has_no_natural_block(self, case9):
        """Test that point estimators carry only the dynamic state."""
        model, truth, theta_hat, omega_hat = setup_network(case9)
        graph = centralized_graph(model, theta_hat, omega_hat, EstimatorKind.WLS)
        assert graph.nodes[CENTRAL].state_dim == 18
        trace = run_schedule(graph, ScheduleConfig(horizon=0.1, dt=0.01), measurement_channels(model, truth.measurements))
        estimates = assemble_estimates(model, trace)
        assert "natural" not in estimates

    def test_adaptive_q_and_clip(self, case9):
        """Test the stabilised options on the distributed UKF."""
        model, _, theta_hat, omega_hat = setup_network(case9)
        partition = partition_generator_seeded(model.coupling, case9.generator_buses)
        options = GridEstimatorOptions(adaptive_q=True, omega_clip=3.0, sweeps=3)
        graph = distributed_graph(model, partition, theta_hat, omega_hat, options=options)
        node = graph.nodes["C1"]
        m = len(partition.clusters[0])
        assert node.clip == tuple((2 * m + i, 3.0) for i in range(m))
        assert node.model.q[-1, -1] > 1e-4

    def test_invalid_options(self):
        """Test rejected estimator options."""
        with pytest.raises(InvalidParams):
            GridEstimatorOptions(sweeps=0)
        with pytest.raises(InvalidParams):
            GridEstimatorOptions(omega_clip=-1.0)
