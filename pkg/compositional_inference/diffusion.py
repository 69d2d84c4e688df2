"""
Sensitivity screening by diffusing local defect forces over the subsystem graph.

A local physics change at one subsystem is expressed as a defect force. Its
magnitude is spread to neighbouring subsystems either by a one-hop split
weighted by interface-force affinities or by the heat kernel exp(−βL) of the
undirected subsystem graph. Scores scale estimator uncertainty into envelopes
around a baseline trajectory.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Hashable, Mapping, Sequence, Set, Tuple, Union

import networkx as nx
import numpy as np

from compositional_inference.exceptions import InvalidParams
from compositional_inference.numerics import matrix_exp_neg

logger = logging.getLogger(__name__)

DEFAULT_LEAKAGE = 0.6
DEFAULT_BETA = 0.9


@dataclass(frozen=True)
class DiffusionGraph:
    """Undirected weighted graph of subsystems with its Laplacian L = D − W."""

    graph: nx.Graph
    order: Tuple[Hashable, ...]

    @classmethod
    def from_weights(cls, nodes: Sequence[Hashable], weights: Mapping[Tuple[Hashable, Hashable], float]) -> "DiffusionGraph":
        g = nx.Graph()
        g.add_nodes_from(nodes)
        for (u, v), w in weights.items():
            if u == v:
                raise InvalidParams(f"Self-loop on '{u}' is not allowed in a diffusion graph")
            if w < 0:
                raise InvalidParams(f"Edge weight ({u}, {v}) must be non-negative, got {w}")
            if u not in g or v not in g:
                raise InvalidParams(f"Edge ({u}, {v}) references an unknown node")
            g.add_edge(u, v, weight=float(w))
        return cls(g, tuple(nodes))

    @property
    def n_nodes(self) -> int:
        return len(self.order)

    def adjacency(self) -> np.ndarray:
        return nx.to_numpy_array(self.graph, nodelist=list(self.order), weight="weight")

    def laplacian(self) -> np.ndarray:
        return nx.laplacian_matrix(self.graph, nodelist=list(self.order), weight="weight").toarray().astype(float)

    def index(self, node: Hashable) -> int:
        return self.order.index(node)


@dataclass(frozen=True)
class DefectSignal:
    source: Hashable
    magnitude: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.magnitude, dtype=float)
        if np.any(q < 0):
            raise InvalidParams("Defect magnitudes must be non-negative")
        object.__setattr__(self, "magnitude", q)

    @classmethod
    def from_force(cls, source: Hashable, force) -> "DefectSignal":
        return cls(source, np.abs(np.asarray(force, dtype=float)))


def defect_force_stiffness(k_star: float, x3, x4) -> np.ndarray:
    """Defect of a removed internal stiffness: −k*·(x3 − x4)."""
    return -k_star * (np.asarray(x3, dtype=float) - np.asarray(x4, dtype=float))


def defect_force_mass(m_star: float, a3_base) -> np.ndarray:
    """Inertial defect of a removed lumped mass: −m*·a3."""
    return -m_star * np.asarray(a3_base, dtype=float)


def rms(series) -> float:
    values = np.asarray(series, dtype=float)
    return float(np.sqrt(np.mean(values ** 2))) if values.size else 0.0


@dataclass(frozen=True)
class EdgeAffinities:
    weights: Dict[Tuple[Hashable, Hashable], float]
    eta: Dict[Hashable, Dict[Hashable, float]]
    uniform_fallback: Set[Hashable] = field(default_factory=set)


def edge_weights_from_rms(series: Mapping[Tuple[Hashable, Hashable], Union[Sequence[float], np.ndarray]]) -> EdgeAffinities:
    """
    RMS edge weights and per-node normalised affinities.

    ``series`` maps an undirected node pair to the interface-force record it
    carries. η[i][j] = w_ij / Σ_k w_ik over the edges incident to i. A node
    whose incident weights are all zero gets uniform affinities and is listed
    in ``uniform_fallback``.
    """
    if not series:
        raise InvalidParams("At least one interface-force series is required")
    weights = {}
    incident: Dict[Hashable, Dict[Hashable, float]] = {}
    for (u, v), values in series.items():
        if len(values) == 0:
            raise InvalidParams(f"Interface-force series for ({u}, {v}) is empty")
        w = rms(values)
        weights[(u, v)] = w
        incident.setdefault(u, {})[v] = w
        incident.setdefault(v, {})[u] = w

    eta: Dict[Hashable, Dict[Hashable, float]] = {}
    fallback: Set[Hashable] = set()
    for node, neighbours in incident.items():
        total = sum(neighbours.values())
        if total > 0:
            eta[node] = {nbr: w / total for nbr, w in neighbours.items()}
        else:
            logger.warning(f"All interface weights at '{node}' are zero; using uniform affinities")
            fallback.add(node)
            eta[node] = {nbr: 1.0 / len(neighbours) for nbr in neighbours}
    return EdgeAffinities(weights, eta, fallback)


def one_hop_scores(q, alpha: float, eta: Mapping[Hashable, float]):
    """
    Split a defect magnitude between its source and direct neighbours.

    Args:
        q: Magnitude (scalar or series)
        alpha: Leakage, α >= 0
        eta: Neighbour affinities, non-negative

    Returns:
        Tuple (source score, {neighbour: score}) with s_src = q/(1+α) and
        s_j = η_j·α·q/(1+α)
    """
    if alpha < 0:
        raise InvalidParams(f"alpha must be non-negative, got {alpha}")
    if any(value < 0 for value in eta.values()):
        raise InvalidParams("Affinities must be non-negative")
    q = np.asarray(q, dtype=float)
    source = q / (1.0 + alpha)
    neighbours = {nbr: value * alpha * q / (1.0 + alpha) for nbr, value in eta.items()}
    return source, neighbours


def heat_kernel_scores(graph: DiffusionGraph, beta: float, q_def) -> np.ndarray:
    """
    s = exp(−βL)·q over the graph's node order.

    ``q_def`` is a node vector or a (time × node) array; each row is
    diffused independently.
    """
    kernel = matrix_exp_neg(graph.laplacian(), beta)
    q = np.asarray(q_def, dtype=float)
    return q @ kernel.T if q.ndim == 2 else kernel @ q


def sensitivity_envelope(baseline, score, sigma) -> Tuple[np.ndarray, np.ndarray]:
    """baseline ± score·σ, elementwise."""
    sigma_arr = np.asarray(sigma, dtype=float)
    if np.any(sigma_arr < 0):
        raise InvalidParams("sigma must be non-negative")
    half_width = np.asarray(score, dtype=float) * sigma_arr
    base = np.asarray(baseline, dtype=float)
    return base - half_width, base + half_width
