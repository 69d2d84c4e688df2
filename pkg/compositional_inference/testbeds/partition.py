"""
Generator-seeded partitioning of a coupling graph into bounded clusters.

Every generator bus seeds a cluster. Clusters then take turns, in ascending
generator order, absorbing the unassigned bus with the largest coupling to
the cluster, ties broken by the internal-to-cut ratio and then by the lowest
bus index. Buses left over are placed in the best cluster that still has
room, or in a new singleton cluster when every cluster is full.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from compositional_inference.exceptions import InvalidParams

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PartitionConfig:
    s_max: int = 5
    epsilon: float = 1e-12

    def __post_init__(self):
        if self.s_max < 1:
            raise InvalidParams(f"s_max must be >= 1, got {self.s_max}")
        if not self.epsilon > 0:
            raise InvalidParams(f"epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True)
class Partition:
    """Disjoint clusters of bus indices; ``seeds[i]`` is None for clusters opened by residual assignment."""

    clusters: Tuple[Tuple[int, ...], ...]
    seeds: Tuple[Optional[int], ...]

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def average_size(self) -> float:
        return sum(len(c) for c in self.clusters) / len(self.clusters) if self.clusters else 0.0

    def cluster_of(self, node: int) -> int:
        for i, members in enumerate(self.clusters):
            if node in members:
                return i
        raise InvalidParams(f"Node {node} belongs to no cluster")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_clusters": self.n_clusters,
            "average_size": self.average_size,
            "clusters": [list(c) for c in self.clusters],
            "seeds": list(self.seeds),
        }


def _score(coupling: np.ndarray, members: List[int], v: int, epsilon: float) -> Tuple[float, float]:
    row = coupling[v]
    internal = float(row[members].sum())
    cut = float(row.sum()) - internal
    return internal, internal / (cut + epsilon)


def partition_generator_seeded(
    coupling, generator_ids: Sequence[int], config: PartitionConfig = PartitionConfig()
) -> Partition:
    """
    Partition the nodes of ``coupling`` into generator-anchored clusters.

    Args:
        coupling: Square coupling matrix K with zero diagonal
        generator_ids: Node indices of the generator seeds
        config: Cluster size cap and ratio regulariser

    Returns:
        Partition whose first clusters follow ascending generator index

    Raises:
        InvalidParams: If the seeds are empty, repeated or out of range
    """
    k = np.asarray(coupling, dtype=float)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise InvalidParams(f"Coupling matrix must be square, got shape {k.shape}")
    n = k.shape[0]
    seeds = sorted(int(g) for g in generator_ids)
    if not seeds:
        raise InvalidParams("At least one generator seed is required")
    if len(set(seeds)) != len(seeds):
        raise InvalidParams(f"Generator seeds must be distinct, got {list(generator_ids)}")
    if seeds[0] < 0 or seeds[-1] >= n:
        logger.error(f"Generator seeds {seeds} outside a {n}-node graph")
        raise InvalidParams(f"Generator seeds must lie in 0..{n - 1}")
    k = k.copy()
    np.fill_diagonal(k, 0.0)

    clusters: List[List[int]] = [[g] for g in seeds]
    cluster_seeds: List[Optional[int]] = list(seeds)
    unassigned = set(range(n)) - set(seeds)

    grew = True
    rounds = 0
    while grew and unassigned:
        grew = False
        rounds += 1
        for members in clusters:
            if len(members) >= config.s_max or not unassigned:
                continue
            best, best_key = None, None
            for v in sorted(unassigned):
                internal, ratio = _score(k, members, v, config.epsilon)
                if internal <= 0:
                    continue
                key = (internal, ratio)
                if best_key is None or key > best_key:
                    best, best_key = v, key
            if best is not None:
                members.append(best)
                unassigned.discard(best)
                grew = True
    logger.debug(f"Greedy expansion stopped after {rounds} rounds with {len(unassigned)} nodes left")

    for v in sorted(unassigned):
        best_index, best_key = None, None
        for index, members in enumerate(clusters):
            if len(members) >= config.s_max:
                continue
            key = _score(k, members, v, config.epsilon)
            if best_key is None or key > best_key:
                best_index, best_key = index, key
        if best_index is None:
            logger.debug(f"All clusters full; node {v} opens a new cluster")
            clusters.append([v])
            cluster_seeds.append(None)
        else:
            clusters[best_index].append(v)

    partition = Partition(tuple(tuple(sorted(c)) for c in clusters), tuple(cluster_seeds))
    logger.info(f"Partitioned {n} nodes into {partition.n_clusters} clusters (average size {partition.average_size:.2f})")
    return partition
