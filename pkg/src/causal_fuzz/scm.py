"""Linear structural equations fitted over the user's graph.

The fitted SEM supplies realistic downstream values when the target is
intervened on. Counterfactuals follow abduction-action-prediction: each row keeps
its own inferred residuals, and the intervention only travels along the edges
the caller activates.
"""
import json
import logging
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, PrivateAttr, ValidationError, root_validator, validator
from scipy.special import expit
from typing_extensions import Literal

from causal_fuzz.data import Dataset, build_dataset
from causal_fuzz.errors import ConfigError, DataError, FitError, GraphError, read_text
from causal_fuzz.graph import CausalGraph, Edge, Gate, topological_order
from causal_fuzz.logistic import fit_logistic

logger = logging.getLogger(__name__)

ROWS_PER_COEFFICIENT = 10
LOGISTIC_MAX_ITER = 5000
LOGISTIC_TOL = 1e-6

Link = Literal["identity", "logistic"]


class StructuralEquation(BaseModel):
    node: str
    parents: List[str] = Field(default_factory=list)
    weights: List[float] = Field(default_factory=list)
    intercept: float = 0.0
    link: Link = "identity"
    residual_scale: float = 0.0
    gates: Dict[str, Gate] = Field(default_factory=dict)
    std_errors: Optional[List[float]] = None

    class Config:
        allow_mutation = False
        extra = "forbid"

    @validator("residual_scale")
    def _nonnegative(cls, value: float) -> float:
        if value < 0:
            raise ValueError("residual_scale must be >= 0")
        return value

    @root_validator(skip_on_failure=True)
    def _aligned(cls, values):
        if len(values["weights"]) != len(values["parents"]):
            raise ValueError(f"{values['node']}: {len(values['weights'])} weights for {len(values['parents'])} parents")
        for parent, gate in values["gates"].items():
            if parent not in values["parents"] or gate.gate not in values["parents"]:
                raise ValueError(f"{values['node']}: gate {parent!r}/{gate.gate!r} is not among the parents")
        return values

    def regressors(self, columns: Mapping[str, np.ndarray]) -> np.ndarray:
        """Design columns in parent order; gated parents are zeroed above their cut."""
        out = []
        for parent in self.parents:
            x = np.asarray(columns[parent], dtype=float)
            gate = self.gates.get(parent)
            if gate is not None:
                x = x * (np.asarray(columns[gate.gate]) < gate.below)
            out.append(x)
        return np.column_stack(out) if out else np.empty((0, 0))

    def eta(self, columns: Mapping[str, np.ndarray], n: int) -> np.ndarray:
        if not self.parents:
            return np.full(n, self.intercept)
        return self.intercept + self.regressors(columns) @ np.asarray(self.weights)

    def shift(self, mixed: Mapping[str, np.ndarray], observed: Mapping[str, np.ndarray]) -> np.ndarray:
        # exactly zero for every row whose regressors did not move
        return (self.regressors(mixed) - self.regressors(observed)) @ np.asarray(self.weights)


class FittedSEM(BaseModel):
    graph: CausalGraph
    equations: Dict[str, StructuralEquation]
    # R^2 for continuous nodes, training accuracy for binary ones
    diagnostics: Dict[str, float] = Field(default_factory=dict)

    _order: Optional[List[str]] = PrivateAttr(default=None)

    class Config:
        allow_mutation = False
        extra = "forbid"

    @root_validator(skip_on_failure=True)
    def _matches_graph(cls, values):
        graph: CausalGraph = values["graph"]
        equations: Dict[str, StructuralEquation] = values["equations"]
        for name, eq in equations.items():
            if name != eq.node:
                raise ValueError(f"equation keyed {name!r} describes {eq.node!r}")
            spec = graph.node(name) if name in graph.names else None
            if spec is None:
                raise ValueError(f"equation for unknown node {name!r}")
            if sorted(eq.parents) != graph.parents(name):
                raise ValueError(f"{name}: equation parents {eq.parents} differ from graph parents {graph.parents(name)}")
            if (eq.link == "logistic") != (spec.kind == "binary"):
                raise ValueError(f"{name}: link {eq.link} does not fit a {spec.kind} node")
            if eq.gates != spec.gates:
                raise ValueError(f"{name}: equation gates differ from the graph's")
        for name in graph.features:
            if graph.parents(name) and name not in equations:
                raise ValueError(f"node {name!r} has parents but no equation")
        return values

    @property
    def order(self) -> List[str]:
        if self._order is None:
            self._order = [n for n in topological_order(self.graph) if n != self.graph.outcome]
        return self._order


class Intervention(BaseModel):
    assignments: Dict[str, float]
    active_edges: List[Edge] = Field(default_factory=list)


def parse_sem(text: str) -> FittedSEM:
    try:
        return FittedSEM.parse_obj(json.loads(text))
    except json.JSONDecodeError as e:
        raise ConfigError(f"SEM file syntax error at line {e.lineno} column {e.colno}: {e.msg}") from e
    except ValidationError as e:
        raise ConfigError(f"invalid SEM: {e.errors()[0]['msg']}") from e


def load_sem(path) -> FittedSEM:
    return parse_sem(read_text(path, ConfigError))


def _collinear_column(design: np.ndarray, names: Sequence[str]) -> str:
    for j in range(1, design.shape[1]):
        if np.linalg.matrix_rank(design[:, : j + 1]) == np.linalg.matrix_rank(design[:, :j]):
            return f"{names[j]!r} is collinear with {list(names[:j])}"
    return "design is rank deficient"


def _fit_identity(node: str, parents: List[str], R: np.ndarray, y: np.ndarray, gates):
    n = len(y)
    A = np.column_stack([np.ones(n), R])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    rss = float(resid @ resid)
    dof = max(n - A.shape[1], 1)
    sigma2 = rss / dof
    cov = sigma2 * np.linalg.inv(A.T @ A)
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - rss / tss if tss > 0 else 1.0
    eq = StructuralEquation(
        node=node,
        parents=parents,
        weights=coef[1:].tolist(),
        intercept=float(coef[0]),
        link="identity",
        residual_scale=float(np.sqrt(sigma2)),
        gates=gates,
        std_errors=np.sqrt(np.maximum(np.diag(cov)[1:], 0.0)).tolist(),
    )
    return eq, r2


def _fit_binary(node: str, parents: List[str], R: np.ndarray, y: np.ndarray, gates):
    fit = fit_logistic(R, y, max_iter=LOGISTIC_MAX_ITER, tol=LOGISTIC_TOL)
    if not fit.converged:
        raise FitError(
            f"logistic fit for {node!r} did not converge after {fit.iterations} iterations (|grad|={fit.grad_norm:.3g})"
        )
    A = np.column_stack([np.ones(len(y)), R])
    p = expit(A @ np.concatenate([[fit.intercept], fit.weights]))
    info = A.T @ (A * (p * (1 - p))[:, None])
    try:
        se = np.sqrt(np.maximum(np.diag(np.linalg.inv(info))[1:], 0.0)).tolist()
    except np.linalg.LinAlgError:
        se = None
    accuracy = float(np.mean((p >= 0.5) == (y == 1)))
    eq = StructuralEquation(
        node=node,
        parents=parents,
        weights=fit.weights.tolist(),
        intercept=fit.intercept,
        link="logistic",
        gates=gates,
        std_errors=se,
    )
    return eq, accuracy


def fit_sem(graph: CausalGraph, data: Dataset) -> FittedSEM:
    equations = {}
    diagnostics = {}
    for node in topological_order(graph):
        if node == graph.outcome:
            continue
        if node not in data.columns:
            raise DataError(f"graph node {node!r} is not a dataset column")
        parents = graph.parents(node)
        if not parents:
            continue
        spec = graph.node(node)
        columns = {p: data.column(p) for p in parents}
        R = StructuralEquation(node=node, parents=parents, weights=[0.0] * len(parents), gates=spec.gates).regressors(
            columns
        )
        y = data.column(node)
        n, k = R.shape
        if n < ROWS_PER_COEFFICIENT * (k + 1):
            raise FitError(f"{node!r}: {n} rows for {k + 1} coefficients, need {ROWS_PER_COEFFICIENT * (k + 1)}")
        design = np.column_stack([np.ones(n), R])
        if np.linalg.matrix_rank(design) < k + 1:
            raise FitError(f"rank-deficient design for {node!r}: " + _collinear_column(design, ["intercept"] + parents))

        if spec.kind == "binary":
            eq, score = _fit_binary(node, parents, R, y, spec.gates)
        else:
            eq, score = _fit_identity(node, parents, R, y, spec.gates)
        equations[node] = eq
        diagnostics[node] = score
        logger.debug("fitted %s on %s: weights=%s diag=%.4f", node, parents, eq.weights, score)
    return FittedSEM(graph=graph, equations=equations, diagnostics=diagnostics)


class WeakEdge(BaseModel):
    src: str
    dst: str
    t_stat: float


def edge_support(sem: FittedSEM, min_t: float = 2.0) -> List[WeakEdge]:
    """Edges whose fitted coefficient the reference data barely supports."""
    weak = []
    for node in sem.order:
        eq = sem.equations.get(node)
        if eq is None or eq.std_errors is None:
            continue
        for parent, weight, se in zip(eq.parents, eq.weights, eq.std_errors):
            t_stat = abs(weight) / se if se > 0 else float("inf")
            if t_stat < min_t:
                weak.append(WeakEdge(src=parent, dst=node, t_stat=round(t_stat, 6)))
    return weak


def sample_synthetic(
    spec: FittedSEM,
    n: int,
    seed: int,
    exogenous: Optional[Mapping[str, np.ndarray]] = None,
) -> Dataset:
    """Ancestral sampling in topological order.

    Root nodes are drawn from their parent-less equation unless `exogenous`
    supplies their column. The outcome is sampled only if it has an equation.
    """
    if n <= 0:
        raise DataError("n must be positive")
    graph = spec.graph
    rng = np.random.default_rng(seed)
    columns: Dict[str, np.ndarray] = {}
    for node in topological_order(graph):
        if exogenous is not None and node in exogenous:
            columns[node] = np.asarray(exogenous[node], dtype=float)
            continue
        eq = spec.equations.get(node)
        if eq is None:
            if node == graph.outcome:
                continue
            raise ConfigError(f"node {node!r} has no sampling equation")
        eta = eq.eta(columns, n)
        if eq.link == "identity":
            columns[node] = eta + rng.normal(0.0, eq.residual_scale, n)
        else:
            columns[node] = (rng.random(n) < expit(eta)).astype(float)
    names = [name for name in graph.names if name in columns]
    return build_dataset(names, {name: graph.kind(name) for name in names}, np.column_stack([columns[c] for c in names]))


def propagate(
    sem: FittedSEM,
    columns: Sequence[str],
    values: np.ndarray,
    assigned: Mapping[str, np.ndarray],
    active_edges: Iterable[Edge],
) -> np.ndarray:
    """Counterfactual rows for a batch.

    Each node's counterfactual uses counterfactual parent values along active
    edges and observed values along inactive ones, and carries the row's own
    residual. Nodes whose active parents did not move keep the observed value
    bit-for-bit.
    """
    index = {name: j for j, name in enumerate(columns)}
    for name in sem.graph.features:
        if name not in index:
            raise DataError(f"row is missing graph feature {name!r}")
    active: FrozenSet[Edge] = frozenset(active_edges)
    observed = np.asarray(values, dtype=float)
    cf = observed.copy()
    changed = np.zeros(observed.shape, dtype=bool)

    for node in sem.order:
        j = index[node]
        if node in assigned:
            cf[:, j] = assigned[node]
            changed[:, j] = cf[:, j] != observed[:, j]
            continue
        eq = sem.equations.get(node)
        if eq is None:
            continue
        live = [p for p in eq.parents if (p, node) in active]
        if not live:
            continue
        rows = np.zeros(len(observed), dtype=bool)
        for parent in live:
            rows |= changed[:, index[parent]]
        if not rows.any():
            continue

        before = {p: observed[rows, index[p]] for p in eq.parents}
        after = {p: (cf[rows, index[p]] if p in live else before[p]) for p in eq.parents}
        if eq.link == "identity":
            cf[rows, j] = observed[rows, j] + eq.shift(after, before)
        else:
            k = int(rows.sum())
            carry = observed[rows, j] - expit(eq.eta(before, k))
            cf[rows, j] = (expit(eq.eta(after, k)) + carry >= 0.5).astype(float)
        changed[:, j] = cf[:, j] != observed[:, j]
    return cf


def counterfactual_row(sem: FittedSEM, row: Mapping[str, float], intervention: Intervention) -> Dict[str, float]:
    graph = sem.graph
    for name in intervention.assignments:
        if name == graph.outcome:
            raise GraphError(f"cannot assign to the outcome node {name!r}")
        if name not in graph.names:
            raise GraphError(f"assignment to unknown node {name!r}")
    edges = set(graph.edges)
    for edge in intervention.active_edges:
        if tuple(edge) not in edges:
            raise GraphError(f"active edge {edge[0]} -> {edge[1]} is not in the graph")

    columns = list(row)
    values = np.array([[row[c] for c in columns]], dtype=float)
    assigned = {name: np.array([value], dtype=float) for name, value in intervention.assignments.items()}
    out = propagate(sem, columns, values, assigned, [tuple(e) for e in intervention.active_edges])
    return {name: float(out[0, j]) for j, name in enumerate(columns)}
