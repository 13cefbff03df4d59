from typing import Dict, List, Optional

import pytest

from causal_fuzz.fuzz import run_causal_fuzz
from causal_fuzz.estimator import FuzzConfig
from causal_fuzz.generators import gen_failure_mode
from causal_fuzz.graph import CausalGraph, NodeSpec
from causal_fuzz.predictor import LinearPredictor
from causal_fuzz.scm import FittedSEM, StructuralEquation, fit_sem, sample_synthetic
from causal_fuzz.unlearn import unlearn_feature_removal

# Z -> M -> F -> Y with shortcuts Z -> F, M -> Y and Z -> Y
LINEAR_EDGES = [("Z", "M"), ("M", "F"), ("Z", "F"), ("F", "Y"), ("M", "Y"), ("Z", "Y")]
LINEAR_WEIGHTS = {("Z", "M"): 2.0, ("M", "F"): 0.5, ("Z", "F"): -1.5}


def make_graph(edges, binary=(), target="Z", outcome="Y", extra=()) -> CausalGraph:
    names = []
    for src, dst in edges:
        for name in (src, dst):
            if name not in names:
                names.append(name)
    names += [n for n in extra if n not in names]
    nodes = []
    for name in names:
        role = "target" if name == target else "outcome" if name == outcome else "feature"
        kind = "binary" if name in binary or name == outcome else "continuous"
        nodes.append(NodeSpec(name=name, role=role, kind=kind))
    return CausalGraph(nodes=nodes, edges=list(edges))


def make_sem(
    graph: CausalGraph,
    weights: Dict[tuple, float],
    scales: Optional[Dict[str, float]] = None,
    intercepts: Optional[Dict[str, float]] = None,
) -> FittedSEM:
    """Explicit linear SEM; roots get N(intercept, scale) equations, the outcome none."""
    scales = scales or {}
    intercepts = intercepts or {}
    equations = {}
    for name in graph.features:
        parents = graph.parents(name)
        link = "logistic" if graph.kind(name) == "binary" else "identity"
        equations[name] = StructuralEquation(
            node=name,
            parents=parents,
            weights=[weights.get((p, name), 0.0) for p in parents],
            intercept=intercepts.get(name, 0.0),
            link=link,
            residual_scale=0.0 if link == "logistic" else scales.get(name, 1.0 if not parents else 0.0),
        )
    return FittedSEM(graph=graph, equations=equations)


@pytest.fixture(scope="session")
def linear_graph() -> CausalGraph:
    return make_graph(LINEAR_EDGES)


@pytest.fixture(scope="session")
def linear_sem(linear_graph) -> FittedSEM:
    return make_sem(linear_graph, LINEAR_WEIGHTS)


@pytest.fixture(scope="session")
def linear_data(linear_sem):
    return sample_synthetic(linear_sem, 500, seed=7)


@pytest.fixture
def linear_config(linear_graph, linear_sem, linear_data):
    def build(weights: List[float], schema=("Z", "M", "F"), **kwargs) -> FuzzConfig:
        predictor = LinearPredictor.manual(list(schema), weights)
        kwargs.setdefault("score_kind", "raw")
        kwargs.setdefault("target", "Z")
        return FuzzConfig.create(graph=linear_graph, sem=linear_sem, predictor=predictor, data=linear_data, **kwargs)

    return build


class Scenario:
    def __init__(self, family: str, target: str, n: int = 20000, seed: int = 0):
        self.mode = gen_failure_mode(family, n, seed, strength=1.0)
        self.data = self.mode.data
        self.graph = self.mode.graph
        self.target = target
        self.sem = fit_sem(self.graph, self.data)
        self.predictor = unlearn_feature_removal(self.data, target, "risk", seed=seed)

    def config(self, **kwargs) -> FuzzConfig:
        kwargs.setdefault("budget", 10000)
        return FuzzConfig.create(
            graph=self.graph, sem=self.sem, predictor=self.predictor, data=self.data, target=self.target, **kwargs
        )

    def run(self, **kwargs):
        return run_causal_fuzz(self.config(**kwargs))


@pytest.fixture(scope="session")
def proxy() -> Scenario:
    return Scenario("proxy", "smoking")


@pytest.fixture(scope="session")
def cancellation() -> Scenario:
    return Scenario("cancellation", "education")


@pytest.fixture(scope="session")
def subgroup() -> Scenario:
    return Scenario("subgroup", "exposure")
