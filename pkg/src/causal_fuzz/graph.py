"""User-supplied causal DAG: parsing, validation and Z→Y route analysis.

The graph is the only structural knowledge the tester gets. Nodes are observed
features plus the outcome (the model output); exactly one feature is the
unlearning target Z for a given audit run.
"""
import json
import logging
import pkgutil
import re
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from pydantic import BaseModel, Field, PrivateAttr, ValidationError, root_validator, validator
from typing_extensions import Literal

from causal_fuzz.data import Dataset, Kind
from causal_fuzz.errors import DataError, GraphError, read_text

logger = logging.getLogger(__name__)

ARROW = "→"
DEFAULT_MAX_LENGTH = 4

Role = Literal["target", "outcome", "feature"]
Edge = Tuple[str, str]

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")


class Gate(BaseModel):
    gate: str
    below: float


class NodeSpec(BaseModel):
    name: str
    role: Role = "feature"
    kind: Kind = "continuous"
    # parent name -> gate; that parent only acts while the gate parent is below the cut
    gates: Dict[str, Gate] = Field(default_factory=dict)

    class Config:
        allow_mutation = False
        extra = "forbid"

    @validator("name")
    def _identifier(cls, name: str) -> str:
        if not _NAME_RE.match(name):
            raise ValueError(f"invalid node name {name!r}")
        return name


def find_cycle(names: Iterable[str], edges: Iterable[Edge]) -> Optional[List[str]]:
    """Returns one directed cycle as a closed node sequence, or None for a DAG."""
    dag = nx.DiGraph()
    dag.add_nodes_from(names)
    dag.add_edges_from(edges)
    try:
        cycle = nx.find_cycle(dag)
    except nx.NetworkXNoCycle:
        return None
    return [src for src, _ in cycle] + [cycle[0][0]]


def sort_nodes(names: Iterable[str], edges: Iterable[Edge]) -> List[str]:
    """Lexicographic topological sort; GraphError when no order exists."""
    dag = nx.DiGraph()
    dag.add_nodes_from(names)
    dag.add_edges_from(edges)
    try:
        return list(nx.lexicographical_topological_sort(dag))
    except nx.NetworkXUnfeasible as e:
        raise GraphError(f"graph has no topological order: {e}") from e


class CausalGraph(BaseModel):
    nodes: List[NodeSpec]
    edges: List[Edge] = Field(default_factory=list)

    _dag: Optional[nx.DiGraph] = PrivateAttr(default=None)

    class Config:
        allow_mutation = False
        extra = "forbid"

    @root_validator(skip_on_failure=True)
    def _check_structure(cls, values):
        nodes: List[NodeSpec] = values["nodes"]
        edges: List[Edge] = values["edges"]

        names = set()
        for node in nodes:
            if node.name in names:
                raise ValueError(f"duplicate node {node.name!r}")
            names.add(node.name)

        outcomes = [n.name for n in nodes if n.role == "outcome"]
        if len(outcomes) != 1:
            raise ValueError(f"exactly one outcome node required, found {len(outcomes)}")
        targets = [n.name for n in nodes if n.role == "target"]
        if len(targets) > 1:
            raise ValueError(f"at most one target node allowed, found {targets}")

        seen_edges = set()
        for src, dst in edges:
            for endpoint in (src, dst):
                if endpoint not in names:
                    raise ValueError(f"unknown edge endpoint {endpoint!r} in {src} -> {dst}")
            if src == dst:
                raise ValueError(f"self-loop on {src!r}")
            if src == outcomes[0]:
                raise ValueError(f"outcome {src!r} cannot have outgoing edges")
            if (src, dst) in seen_edges:
                raise ValueError(f"duplicate edge {src} -> {dst}")
            seen_edges.add((src, dst))

        cycle = find_cycle([n.name for n in nodes], edges)
        if cycle is not None:
            raise ValueError("cycle detected: " + " -> ".join(cycle))

        for node in nodes:
            parents = {src for src, dst in edges if dst == node.name}
            for parent, gate in node.gates.items():
                if parent not in parents or gate.gate not in parents:
                    raise ValueError(f"gate on {node.name!r}: {parent!r} and {gate.gate!r} must both be parents")
                if parent == gate.gate:
                    raise ValueError(f"gate on {node.name!r}: {parent!r} cannot gate itself")
        return values

    @property
    def dag(self) -> nx.DiGraph:
        if self._dag is None:
            dag = nx.DiGraph()
            dag.add_nodes_from(n.name for n in self.nodes)
            dag.add_edges_from(self.edges)
            self._dag = dag
        return self._dag

    @property
    def names(self) -> List[str]:
        return [n.name for n in self.nodes]

    @property
    def outcome(self) -> str:
        return next(n.name for n in self.nodes if n.role == "outcome")

    @property
    def target(self) -> Optional[str]:
        return next((n.name for n in self.nodes if n.role == "target"), None)

    @property
    def features(self) -> List[str]:
        return [n.name for n in self.nodes if n.role != "outcome"]

    def node(self, name: str) -> NodeSpec:
        for node in self.nodes:
            if node.name == name:
                return node
        raise GraphError(f"unknown node {name!r}")

    def kind(self, name: str) -> str:
        return self.node(name).kind

    def parents(self, name: str) -> List[str]:
        return sorted(self.dag.predecessors(name))

    def descendants(self, name: str) -> List[str]:
        return sorted(nx.descendants(self.dag, name))

    def require_target(self) -> str:
        if self.target is None:
            raise GraphError("no node has role=target; bind one with with_target()")
        return self.target

    def with_target(self, name: str) -> "CausalGraph":
        """Rebinds the target role for an audit run."""
        spec = self.node(name)
        if spec.role == "outcome":
            raise GraphError(f"outcome {name!r} cannot be the target")
        nodes = []
        for node in self.nodes:
            if node.name == name:
                node = node.copy(update={"role": "target"})
            elif node.role == "target":
                node = node.copy(update={"role": "feature"})
            nodes.append(node)
        return CausalGraph(nodes=nodes, edges=self.edges)


def parse_graph(text: str) -> CausalGraph:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise GraphError(f"syntax error at line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(raw, dict):
        raise GraphError("graph file must contain a top-level object")
    try:
        return CausalGraph.parse_obj(raw)
    except ValidationError as e:
        raise GraphError(e.errors()[0]["msg"]) from e


def load_graph(path) -> CausalGraph:
    return parse_graph(read_text(path, GraphError))


def topological_order(graph: CausalGraph) -> List[str]:
    return sort_nodes(graph.names, graph.edges)


def path_label(path: Sequence[str]) -> str:
    return ARROW.join(path)


def path_edges(path: Sequence[str]) -> List[Edge]:
    return list(zip(path[:-1], path[1:]))


class PathSet(BaseModel):
    paths: List[Tuple[str, ...]] = Field(default_factory=list)
    # proxy strength per path, filled in by prioritize_paths
    scores: Optional[List[float]] = None

    class Config:
        allow_mutation = False

    @property
    def active_edges(self) -> List[Edge]:
        edges = set()
        for path in self.paths:
            edges.update(path_edges(path))
        return sorted(edges)

    @property
    def labels(self) -> List[str]:
        return [path_label(p) for p in self.paths]

    def __len__(self) -> int:
        return len(self.paths)

    def single(self, index: int) -> "PathSet":
        scores = None if self.scores is None else [self.scores[index]]
        return PathSet(paths=[self.paths[index]], scores=scores)


def enumerate_paths(graph: CausalGraph, max_length: int = DEFAULT_MAX_LENGTH) -> PathSet:
    target = graph.require_target()
    if max_length < 1:
        raise GraphError("max_length must be at least 1")
    found = nx.all_simple_paths(graph.dag, target, graph.outcome, cutoff=max_length)
    paths = sorted((tuple(p) for p in found), key=lambda p: (len(p), p))
    logger.debug("enumerated %d paths from %s to %s", len(paths), target, graph.outcome)
    return PathSet(paths=paths)


def proxy_strength(path: Sequence[str], data: Dataset) -> float:
    """Product of |Pearson r| over consecutive feature pairs; the outcome hop is excluded."""
    strength = 1.0
    features = path[:-1]
    for a, b in zip(features[:-1], features[1:]):
        r = np.corrcoef(data.column(a), data.column(b))[0, 1]
        strength *= 0.0 if not np.isfinite(r) else abs(float(r))
    return strength


def prioritize_paths(paths: PathSet, data: Dataset, k: int) -> PathSet:
    if k < 1:
        raise GraphError("k must be at least 1")
    for path in paths.paths:
        for name in path[:-1]:
            if name not in data.columns:
                raise DataError(f"path node {name!r} is not a dataset column")
    scored = [(proxy_strength(p, data), path_label(p), p) for p in paths.paths]
    scored.sort(key=lambda item: (-item[0], item[1]))
    top = scored[:k]
    return PathSet(paths=[p for _, _, p in top], scores=[s for s, _, _ in top])


def bundled_graph(name: str) -> CausalGraph:
    """Coarse example graph shipped for a public dataset ("adult" or "drug")."""
    try:
        payload = pkgutil.get_data(__package__, f"datasets/{name}.graph.json")
    except FileNotFoundError:
        payload = None
    if payload is None:
        raise GraphError(f"no bundled graph named {name!r}")
    return parse_graph(payload.decode())
