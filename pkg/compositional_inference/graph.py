"""
System-of-systems graph: subsystem nodes, directed interface edges, the
global message register, and hierarchical embedding of subgraphs.
"""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from compositional_inference.estimators import EstimatorKind, UkfParams
from compositional_inference.exceptions import (
    BoundaryMismatch,
    DanglingEdge,
    DuplicateNodeId,
    IndexOutOfRange,
    InvalidParams,
    MissingRegisterEntry,
    SelectorOutOfRange,
)
from compositional_inference.interface_laws import LearnedEdgeLaw
from compositional_inference.models import GaussianBelief, StateSpaceModel

logger = logging.getLogger(__name__)


class MessageMode(Enum):
    DETERMINISTIC = "deterministic"
    PROBABILISTIC = "probabilistic"
    LEARNED = "learned"


@dataclass(frozen=True)
class Message:
    mean: np.ndarray
    variance: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).reshape(-1))
        if self.variance is not None and self.variance < 0:
            raise InvalidParams(f"Message variance must be non-negative, got {self.variance}")


@dataclass(frozen=True)
class SubsystemNode:
    """
    One subsystem: local model, estimator, initial belief and wiring.

    ``interface_selector`` lists the state components the node exposes to its
    neighbours. ``measurement_source`` and ``input_source`` name channels in
    the measurement and exogenous-input mappings handed to the schedules.
    ``clip`` holds (state index, bound) pairs enforcing |x_i| <= bound on the
    posterior mean after every step.
    """

    node_id: str
    model: StateSpaceModel
    estimator: EstimatorKind
    belief: GaussianBelief
    interface_selector: Tuple[int, ...] = ()
    measurement_source: Optional[str] = None
    input_source: Optional[str] = None
    ukf_params: UkfParams = UkfParams()
    wnls_iters: int = 5
    wnls_damping: float = 0.5
    clip: Tuple[Tuple[int, float], ...] = ()

    @property
    def state_dim(self) -> int:
        return self.model.state_dim

    @property
    def filters(self) -> bool:
        return self.estimator is not EstimatorKind.DETERMINISTIC

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.node_id,
            "estimator": self.estimator.value,
            "state_dim": self.state_dim,
            "interface_selector": list(self.interface_selector),
            "measurement_source": self.measurement_source,
        }


@dataclass(frozen=True)
class InterfaceEdge:
    """
    Directed coupling sender → receiver.

    The law is evaluated on ``sender_selector`` / ``receiver_selector`` slices
    of the two register entries; message component i is added to receiver
    input ``target_indices[i]``. Probabilistic edges inject their variance
    into receiver state ``noise_state_index`` scaled by ``receiver_mass``.
    """

    sender: str
    receiver: str
    law: Any
    sender_selector: Tuple[int, ...]
    receiver_selector: Tuple[int, ...]
    target_indices: Tuple[int, ...]
    mode: MessageMode = MessageMode.DETERMINISTIC
    noise_state_index: Optional[int] = None
    receiver_mass: Optional[float] = None
    label: str = ""

    @property
    def key(self) -> Tuple[str, str, str]:
        return (self.sender, self.receiver, self.label)

    @property
    def gamma(self) -> Dict[str, Any]:
        return self.law.to_dict()

    @property
    def name(self) -> str:
        suffix = f"[{self.label}]" if self.label else ""
        return f"{self.sender}->{self.receiver}{suffix}"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sender": self.sender,
            "receiver": self.receiver,
            "mode": self.mode.value,
            "law": self.gamma,
            "target_indices": list(self.target_indices),
        }


@dataclass(frozen=True)
class SystemGraph:
    nodes: Dict[str, SubsystemNode]
    edges: Tuple[InterfaceEdge, ...]
    incoming: Dict[str, Tuple[InterfaceEdge, ...]]
    outgoing: Dict[str, Tuple[InterfaceEdge, ...]]
    topology: nx.MultiDiGraph = field(compare=False)

    @property
    def node_ids(self) -> Tuple[str, ...]:
        return tuple(self.nodes)

    def neighbors(self, node_id: str) -> List[str]:
        return sorted(set(self.topology.predecessors(node_id)) | set(self.topology.successors(node_id)))

    def __repr__(self):
        return f"SystemGraph(nodes={list(self.nodes)}, edges={[e.name for e in self.edges]})"


def _check_selector(selector: Sequence[int], dim: int, where: str):
    for index in selector:
        if not 0 <= index < dim:
            logger.error(f"Selector index {index} out of range for {where} (dim {dim})")
            raise SelectorOutOfRange(f"Selector index {index} out of range for {where} with {dim} states")


def build_graph(nodes: Iterable[SubsystemNode], edges: Iterable[InterfaceEdge]) -> SystemGraph:
    """
    Validate nodes and edges and precompute adjacency.

    Args:
        nodes: Subsystem nodes, in the order schedules will visit them
        edges: Directed interface edges

    Returns:
        Immutable system graph

    Raises:
        DuplicateNodeId: If two nodes share an id
        DanglingEdge: If an edge references an unknown node
        SelectorOutOfRange: If a selector exceeds its node's state
    """
    node_map: Dict[str, SubsystemNode] = {}
    for node in nodes:
        if node.node_id in node_map:
            logger.error(f"Duplicate node id '{node.node_id}'")
            raise DuplicateNodeId(f"Duplicate node id '{node.node_id}'")
        if node.belief.dim != node.model.state_dim:
            raise InvalidParams(
                f"Node '{node.node_id}' belief dim {node.belief.dim} != model state dim {node.model.state_dim}"
            )
        _check_selector(node.interface_selector, node.state_dim, f"node '{node.node_id}'")
        node_map[node.node_id] = node

    edge_list = tuple(edges)
    incoming: Dict[str, List[InterfaceEdge]] = defaultdict(list)
    outgoing: Dict[str, List[InterfaceEdge]] = defaultdict(list)
    topology = nx.MultiDiGraph()
    topology.add_nodes_from(node_map)
    seen_keys = set()

    for edge in edge_list:
        for endpoint in (edge.sender, edge.receiver):
            if endpoint not in node_map:
                logger.error(f"Edge {edge.name} references missing node '{endpoint}'")
                raise DanglingEdge(f"Edge {edge.name} references missing node '{endpoint}'")
        if edge.sender == edge.receiver:
            raise InvalidParams(f"Edge {edge.name} connects a node to itself")
        if edge.key in seen_keys:
            raise InvalidParams(f"Duplicate edge {edge.name}; give parallel edges distinct labels")
        seen_keys.add(edge.key)
        sender, receiver = node_map[edge.sender], node_map[edge.receiver]
        _check_selector(edge.sender_selector, sender.state_dim, f"edge {edge.name} sender")
        _check_selector(edge.receiver_selector, receiver.state_dim, f"edge {edge.name} receiver")
        if (len(edge.sender_selector), len(edge.receiver_selector)) != (edge.law.sender_dim, edge.law.receiver_dim):
            raise InvalidParams(
                f"Edge {edge.name} selectors ({len(edge.sender_selector)}, {len(edge.receiver_selector)}) "
                f"do not match law arity ({edge.law.sender_dim}, {edge.law.receiver_dim})"
            )
        for index in edge.target_indices:
            if not 0 <= index < receiver.model.input_dim:
                raise IndexOutOfRange(
                    f"Edge {edge.name} targets input {index} of a {receiver.model.input_dim}-input model"
                )
        if edge.mode is MessageMode.PROBABILISTIC:
            if edge.noise_state_index is None or not edge.receiver_mass or edge.receiver_mass <= 0:
                raise InvalidParams(f"Probabilistic edge {edge.name} needs noise_state_index and receiver_mass")
            if not 0 <= edge.noise_state_index < receiver.state_dim:
                raise IndexOutOfRange(f"Edge {edge.name} noise index {edge.noise_state_index} out of range")
        if edge.mode is MessageMode.LEARNED and not isinstance(edge.law, LearnedEdgeLaw):
            raise InvalidParams(f"Learned edge {edge.name} must carry a learned law")
        incoming[edge.receiver].append(edge)
        outgoing[edge.sender].append(edge)
        topology.add_edge(edge.sender, edge.receiver, key=edge.label)

    logger.debug(f"Built graph with {len(node_map)} nodes and {len(edge_list)} edges")
    return SystemGraph(
        nodes=node_map,
        edges=edge_list,
        incoming={nid: tuple(incoming.get(nid, ())) for nid in node_map},
        outgoing={nid: tuple(outgoing.get(nid, ())) for nid in node_map},
        topology=topology,
    )


@dataclass(frozen=True)
class RegisterEntry:
    mean: np.ndarray
    cov: np.ndarray
    label: int


class GlobalRegister:
    """
    Double-buffered store of every node's latest mean and covariance.

    ``write`` stages an entry for the next label and ``commit`` publishes all
    staged entries at once (Jacobi). ``publish`` overwrites the current entry
    immediately (Gauss-Seidel).
    """

    def __init__(self, entries: Optional[Mapping[str, RegisterEntry]] = None, label: int = 0):
        self._current: Dict[str, RegisterEntry] = dict(entries or {})
        self._pending: Dict[str, RegisterEntry] = {}
        self.label = label

    @classmethod
    def from_graph(cls, graph: SystemGraph) -> "GlobalRegister":
        entries = {
            nid: RegisterEntry(node.belief.mean.copy(), node.belief.cov.copy(), 0)
            for nid, node in graph.nodes.items()
        }
        return cls(entries, 0)

    def read(self, node_id: str) -> RegisterEntry:
        try:
            return self._current[node_id]
        except KeyError:
            logger.error(f"Register has no entry for node '{node_id}'")
            raise MissingRegisterEntry(f"Register has no entry for node '{node_id}'") from None

    def write(self, node_id: str, mean: np.ndarray, cov: np.ndarray):
        self._pending[node_id] = RegisterEntry(np.array(mean, dtype=float), np.array(cov, dtype=float), self.label + 1)

    def commit(self):
        self._current.update(self._pending)
        self._pending = {}
        self.label += 1

    def publish(self, node_id: str, mean: np.ndarray, cov: np.ndarray):
        self._current[node_id] = RegisterEntry(np.array(mean, dtype=float), np.array(cov, dtype=float), self.label)

    def snapshot(self) -> "GlobalRegister":
        return GlobalRegister(self._current, self.label)

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._current


@dataclass
class NodeInputs:
    u: np.ndarray
    variance: np.ndarray
    messages: Dict[Tuple[str, str, str], Message]


def collect_messages(
    node_id: str,
    register: GlobalRegister,
    edges: Iterable[InterfaceEdge],
    input_dim: Optional[int] = None,
) -> NodeInputs:
    """
    Evaluate and aggregate the messages arriving at ``node_id``.

    Means and variances are summed per receiver input index. Sums are
    exactly rounded so the result does not depend on edge order.

    Args:
        node_id: Receiver
        register: Register to read interface states from
        edges: Candidate edges; only those ending at ``node_id`` are used
        input_dim: Length of the aggregated input vector (defaults to the
            largest target index + 1)

    Returns:
        Aggregated input vector, per-index variance, and the individual messages

    Raises:
        MissingRegisterEntry: If a sender or the receiver has no register entry
    """
    arriving = [edge for edge in edges if edge.receiver == node_id]
    if input_dim is None:
        input_dim = max((i + 1 for edge in arriving for i in edge.target_indices), default=0)
    mean_terms: Dict[int, List[float]] = defaultdict(list)
    var_terms: Dict[int, List[float]] = defaultdict(list)
    messages: Dict[Tuple[str, str, str], Message] = {}

    receiver = register.read(node_id) if arriving else None
    for edge in arriving:
        sender = register.read(edge.sender)
        s_sender = sender.mean[list(edge.sender_selector)]
        s_receiver = receiver.mean[list(edge.receiver_selector)]
        value = np.asarray(edge.law.evaluate(s_sender, s_receiver), dtype=float).reshape(-1)
        if value.shape[0] != len(edge.target_indices):
            raise InvalidParams(
                f"Edge {edge.name} produced {value.shape[0]} values for {len(edge.target_indices)} targets"
            )
        variance = None
        if edge.mode is MessageMode.PROBABILISTIC:
            sel_s, sel_r = list(edge.sender_selector), list(edge.receiver_selector)
            variance = edge.law.variance(
                s_sender, s_receiver, sender.cov[np.ix_(sel_s, sel_s)], receiver.cov[np.ix_(sel_r, sel_r)]
            )
        messages[edge.key] = Message(value, variance)
        for target, component in zip(edge.target_indices, value):
            mean_terms[target].append(float(component))
            if variance is not None:
                var_terms[target].append(variance)

    u = np.zeros(input_dim)
    total_var = np.zeros(input_dim)
    for target, terms in mean_terms.items():
        u[target] = math.fsum(terms)
    for target, terms in var_terms.items():
        total_var[target] = math.fsum(terms)
    return NodeInputs(u, total_var, messages)


@dataclass(frozen=True)
class BoundaryPort:
    """
    Maps one interface of an outer node onto a node of the embedded graph.

    Outer edges whose selector on the embedded node equals ``outer_selector``
    are re-attached to ``inner_node``; state and input indices are translated
    through ``state_map`` and ``input_map``.
    """

    outer_selector: Tuple[int, ...]
    inner_node: str
    state_map: Mapping[int, int]
    input_map: Mapping[int, int] = field(default_factory=dict)


def _map_indices(indices: Sequence[int], mapping: Mapping[int, int], what: str) -> Tuple[int, ...]:
    try:
        return tuple(mapping[i] for i in indices)
    except KeyError as e:
        raise BoundaryMismatch(f"Boundary map has no entry for {what} index {e.args[0]}") from None


def embed_subgraph(
    outer: SystemGraph, node_id: str, inner: SystemGraph, boundary_map: Sequence[BoundaryPort]
) -> SystemGraph:
    """
    Replace ``node_id`` of ``outer`` by the nodes and edges of ``inner``.

    Inner node ids are prefixed with ``"<node_id>/"``. Edges of the outer
    graph that touch ``node_id`` are re-attached through the boundary ports,
    after which inner and outer edges are indistinguishable to the schedules.

    Raises:
        BoundaryMismatch: If a touching edge matches no port, or a port's
            maps do not cover the selectors and targets it must translate
    """
    if node_id not in outer.nodes:
        raise DanglingEdge(f"Cannot embed into missing node '{node_id}'")
    prefix = f"{node_id}/"
    ports = list(boundary_map)
    for port in ports:
        if port.inner_node not in inner.nodes:
            raise BoundaryMismatch(f"Boundary port targets unknown inner node '{port.inner_node}'")
        _map_indices(port.outer_selector, port.state_map, "outer selector")
        target = inner.nodes[port.inner_node]
        if any(not 0 <= i < target.state_dim for i in port.state_map.values()) or any(
            not 0 <= i < target.model.input_dim for i in port.input_map.values()
        ):
            raise BoundaryMismatch(f"Boundary port indices exceed inner node '{port.inner_node}' dimensions")

    def find_port(selector: Tuple[int, ...], targets: Tuple[int, ...] = ()) -> BoundaryPort:
        for port in ports:
            if tuple(port.outer_selector) == tuple(selector) and all(t in port.input_map for t in targets):
                return port
        raise BoundaryMismatch(f"No boundary port matches selector {tuple(selector)} on node '{node_id}'")

    new_nodes: List[SubsystemNode] = []
    for nid, node in outer.nodes.items():
        if nid != node_id:
            new_nodes.append(node)
            continue
        new_nodes.extend(replace(inner_node, node_id=prefix + inner_node.node_id) for inner_node in inner.nodes.values())

    new_edges: List[InterfaceEdge] = [
        replace(edge, sender=prefix + edge.sender, receiver=prefix + edge.receiver) for edge in inner.edges
    ]
    for edge in outer.edges:
        if edge.sender != node_id and edge.receiver != node_id:
            new_edges.append(edge)
            continue
        updated = edge
        if edge.sender == node_id:
            port = find_port(edge.sender_selector)
            updated = replace(
                updated,
                sender=prefix + port.inner_node,
                sender_selector=_map_indices(edge.sender_selector, port.state_map, "sender selector"),
            )
        if edge.receiver == node_id:
            port = find_port(edge.receiver_selector, edge.target_indices)
            noise_index = edge.noise_state_index
            if noise_index is not None:
                noise_index = _map_indices((noise_index,), port.state_map, "noise state")[0]
            updated = replace(
                updated,
                receiver=prefix + port.inner_node,
                receiver_selector=_map_indices(edge.receiver_selector, port.state_map, "receiver selector"),
                target_indices=_map_indices(edge.target_indices, port.input_map, "target input"),
                noise_state_index=noise_index,
            )
        new_edges.append(updated)

    logger.debug(f"Embedded {len(inner.nodes)}-node subgraph into node '{node_id}'")
    return build_graph(new_nodes, new_edges)
