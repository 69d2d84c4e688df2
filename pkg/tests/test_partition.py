import numpy as np
import pytest

from compositional_inference.exceptions import InvalidParams
from compositional_inference.testbeds.grid import CouplingMode, coupling_from_ybus
from compositional_inference.testbeds.matpower import load_matpower_case
from compositional_inference.testbeds.partition import PartitionConfig, partition_generator_seeded


def partition_case(name, s_max=5):
    case = load_matpower_case(name)
    coupling = coupling_from_ybus(case, CouplingMode.MAGNITUDE)
    return case, partition_generator_seeded(coupling, case.generator_buses, PartitionConfig(s_max=s_max))


def check_invariants(partition, n, seeds, s_max):
    members = [bus for cluster in partition.clusters for bus in cluster]
    assert sorted(members) == list(range(n))
    assert all(len(cluster) <= s_max for cluster in partition.clusters)
    for seed in seeds:
        assert seed in partition.clusters[partition.cluster_of(seed)]
    assert partition.seeds[:len(seeds)] == tuple(sorted(seeds))


class TestIeeeCases:
    """Test generator-seeded partitioning of the IEEE cases."""

    def test_ieee9(self):
        """Test three clusters of average size 3.0 for IEEE 9."""
        case, partition = partition_case("case9")
        assert partition.n_clusters == 3
        assert partition.average_size == pytest.approx(3.0)
        check_invariants(partition, case.n_bus, case.generator_buses, 5)

    def test_ieee14(self):
        """Test five clusters of average size 2.8 for IEEE 14."""
        case, partition = partition_case("case14")
        assert partition.n_clusters == 5
        assert partition.average_size == pytest.approx(2.8)
        check_invariants(partition, case.n_bus, case.generator_buses, 5)

    def test_singletons_when_capped_at_one(self):
        """Test that s_max = 1 leaves every bus alone."""
        case, partition = partition_case("case9", s_max=1)
        assert partition.n_clusters == case.n_bus
        assert partition.seeds.count(None) == case.n_bus - 3
        check_invariants(partition, case.n_bus, case.generator_buses, 1)

    def test_deterministic(self):
        """Test that repeated runs agree."""
        assert partition_case("case14")[1] == partition_case("case14")[1]


class TestGreedyRule:
    """Test the greedy growth rule on small graphs."""

    def test_strongest_coupling_first(self):
        """Test that a seed absorbs its most strongly coupled neighbour."""
        k = np.array([
            [0.0, 5.0, 1.0],
            [5.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
        ])
        partition = partition_generator_seeded(k, [0], PartitionConfig(s_max=2))
        assert partition.clusters == ((0, 1), (2,))
        assert partition.seeds == (0, None)

    def test_isolated_node_assigned(self):
        """Test that an uncoupled node still joins a cluster with room."""
        k = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        partition = partition_generator_seeded(k, [0], PartitionConfig(s_max=5))
        assert partition.clusters == ((0, 1, 2),)

    def test_invalid_seeds(self):
        """Test rejected seed lists."""
        k = np.zeros((3, 3))
        with pytest.raises(InvalidParams):
            partition_generator_seeded(k, [])
        with pytest.raises(InvalidParams):
            partition_generator_seeded(k, [0, 0])
        with pytest.raises(InvalidParams):
            partition_generator_seeded(k, [3])
        with pytest.raises(InvalidParams):
            PartitionConfig(s_max=0)

    def test_to_dict(self):
        """Test the JSON view."""
        partition = partition_generator_seeded(np.array([[0.0, 1.0], [1.0, 0.0]]), [1])
        assert partition.to_dict() == {"n_clusters": 1, "average_size": 2.0, "clusters": [[0, 1]], "seeds": [1]}
