import numpy as np
import pytest

from compositional_inference.estimators import EstimatorKind
from compositional_inference.exceptions import InvalidParams, LengthMismatch
from compositional_inference.graph import MessageMode
from compositional_inference.interface_laws import LearnedEdgeLaw, LearnedLaw
from compositional_inference.numerics import make_rng
from compositional_inference.testbeds.chain import (
    MONOLITHIC,
    ChainParams,
    UnknownParam,
    build_chain,
    chain_graph,
    initial_belief,
    monolithic_graph,
    segment_forces,
    simulate_truth,
)

MEASURED = {0: 1e-4, 3: 1e-4}


def four_dof(unknown=()):
    return ChainParams.uniform(4, 500.0, 5e4, 300.0, unknown=unknown)


class TestChainParams:
    """Test chain parameters and matrices."""

    def test_stiffness_matrix(self):
        """Test the tridiagonal stiffness matrix of the 4-DOF chain."""
        k = four_dof().stiffness_matrix()
        np.testing.assert_allclose(np.diag(k), [1e5, 1e5, 1e5, 5e4])
        np.testing.assert_allclose(np.diag(k, 1), [-5e4, -5e4, -5e4])
        np.testing.assert_allclose(k, k.T)

    def test_invalid(self):
        """Test rejected parameter sets."""
        with pytest.raises(InvalidParams):
            ChainParams.uniform(1, 1.0, 1.0, 1.0)
        with pytest.raises(InvalidParams):
            ChainParams([1.0, -1.0], [1.0, 1.0], [0.0, 0.0])
        with pytest.raises(InvalidParams):
            UnknownParam("q", 0, 1.0)
        with pytest.raises(InvalidParams):
            four_dof(unknown=(UnknownParam("k", 3, 3e4), UnknownParam("k", 3, 4e4)))

    def test_forcing_length(self):
        """Test that the forcing must cover every DOF."""
        params = ChainParams.uniform(2, 1.0, 1.0, 0.0, forcing=lambda t: [1.0])
        with pytest.raises(LengthMismatch):
            params.force_at(0.0)

    def test_segment_forces_match_matrices(self):
        """Test that the full-chain segment force equals −Kx − Cv + f."""
        params = four_dof()
        rng = make_rng(2)
        x, v, f = rng.normal(size=4), rng.normal(size=4), rng.normal(size=4)
        expected = f - params.stiffness_matrix() @ x - params.damping_matrix() @ v
        np.testing.assert_allclose(segment_forces(0, params.stiffness, params.damping, x, v, f), expected)


class TestBuildChain:
    """Test partitioning of a chain into subsystems."""

    def test_two_subsystems(self):
        """Test the default 4-DOF split and its interface edges."""
        system = build_chain(four_dof(), measured=MEASURED)
        assert [s.name for s in system.subsystems] == ["S1", "S2"]
        assert system.interface_springs == (2,)
        assert [(e.sender, e.receiver, e.label) for e in system.edges] == [("S1", "S2", "k3"), ("S2", "S1", "k3")]
        assert system.subsystem("S2").measured == (3,)
        assert system.monolithic.state_dim == 8

    def test_unknown_augments_state(self):
        """Test that an unknown stiffness becomes a subsystem state."""
        spec = UnknownParam("k", 3, 3e4, reference=5e4)
        system = build_chain(four_dof((spec,)), measured=MEASURED)
        s2 = system.subsystem("S2")
        assert s2.model.state_dim == 5
        assert s2.param_index("k", 3) == 4
        assert system.monolithic_param_index("k", 3) == 8
        belief = initial_belief(system, np.zeros(4), np.zeros(4), subsystem="S2")
        assert belief.mean[4] == pytest.approx(0.6)

    def test_unknown_interface_element_rejected(self):
        """Test that an interface spring cannot be unknown."""
        with pytest.raises(InvalidParams):
            build_chain(four_dof((UnknownParam("k", 2, 3e4),)))

    def test_bad_groups(self):
        """Test that groups must be contiguous and ordered."""
        with pytest.raises(InvalidParams):
            build_chain(four_dof(), groups=((0, 2), (1, 3)))

    def test_single_subsystem(self):
        """Test a degenerate partition with no edges."""
        system = build_chain(ChainParams.uniform(2, 1.0, 1.0, 0.0))
        assert len(system.subsystems) == 1
        assert system.edges == ()

    def test_learned_edges(self):
        """Test that a learned law replaces the spring-damper on its interface."""
        system = build_chain(four_dof())
        law = LearnedLaw(np.array([5e4, 300.0, 0.0, 0.0, 0.0, 0.0]))
        edges = system.interface_edges(MessageMode.LEARNED, {2: law})
        assert all(isinstance(e.law, LearnedEdgeLaw) for e in edges)
        assert edges[1].law.swap and edges[1].law.sign == -1.0
        with pytest.raises(InvalidParams):
            system.interface_edges(MessageMode.LEARNED, {})


class TestGraphs:
    """Test the chain graph builders."""

    def test_chain_graph(self):
        """Test node wiring of the distributed graph."""
        system = build_chain(four_dof(), measured=MEASURED)
        graph = chain_graph(system, np.zeros(4), np.zeros(4))
        assert graph.node_ids == ("S1", "S2")
        assert graph.nodes["S1"].measurement_source == "S1"
        assert graph.nodes["S1"].estimator is EstimatorKind.UKF

    def test_include_restricts(self):
        """Test that include keeps only the named subsystems."""
        system = build_chain(four_dof(), measured=MEASURED)
        graph = chain_graph(system, np.zeros(4), np.zeros(4), include=["S2"])
        assert graph.node_ids == ("S2",)
        assert graph.edges == ()

    def test_monolithic_graph(self):
        """Test the single-node centralized graph."""
        system = build_chain(four_dof(), measured=MEASURED)
        graph = monolithic_graph(system, np.zeros(4), np.zeros(4))
        assert graph.node_ids == (MONOLITHIC,)
        assert graph.nodes[MONOLITHIC].model.obs_dim == 2


class TestSimulateTruth:
    """Test the reference simulation."""

    def test_free_decay(self):
        """Test shapes and decay of the unforced chain."""
        x0 = np.array([0.01, 0.0, 0.0, 0.0])
        truth, records = simulate_truth(four_dof(), x0, np.zeros(4), 2.0, 1e-3, MEASURED, make_rng(0))
        assert truth.displacement.shape == (2001, 4)
        assert records[0].shape == (2000,)
        energy0 = x0 @ four_dof().stiffness_matrix() @ x0
        x, v = truth.displacement[-1], truth.velocity[-1]
        energy = x @ four_dof().stiffness_matrix() @ x + v @ (500.0 * v)
        assert energy < energy0

    def test_measurement_noise_level(self):
        """Test that measurement residuals have the requested variance."""
        x0 = np.array([0.01, 0.0, 0.0, 0.0])
        truth, records = simulate_truth(four_dof(), x0, np.zeros(4), 2.0, 1e-3, {1: 1e-2}, make_rng(1))
        residual = records[1] - truth.acceleration[1:, 1]
        assert np.var(residual) == pytest.approx(1e-2, rel=0.1)

    def test_interface_force(self):
        """Test the interface force series."""
        params = four_dof()
        truth, _ = simulate_truth(params, np.array([0.01, 0.0, 0.0, 0.0]), np.zeros(4), 0.1, 1e-3)
        force = truth.interface_force(params, 2)
        assert force[0] == pytest.approx(0.0)
        with pytest.raises(InvalidParams):
            truth.interface_force(params, 0)

    def test_rng_required_for_noise(self):
        """Test that noisy records need a generator."""
        with pytest.raises(InvalidParams):
            simulate_truth(four_dof(), np.zeros(4), np.zeros(4), 0.1, 1e-3, MEASURED)
