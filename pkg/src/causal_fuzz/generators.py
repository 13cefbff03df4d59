"""Synthetic datasets with known structure for each failure mode.

Every family builds an explicit linear SEM, samples it, and emits a ground-truth
table of analytic per-path effects in logit units (products of the generating
coefficients). The coefficients are ours; nothing here claims to reproduce
published numbers.
"""
import logging
import math
from typing import Dict, List, NamedTuple, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from causal_fuzz.data import Dataset
from causal_fuzz.errors import ConfigError
from causal_fuzz.graph import CausalGraph, Gate, NodeSpec, enumerate_paths, path_label
from causal_fuzz.scm import FittedSEM, StructuralEquation, sample_synthetic

logger = logging.getLogger(__name__)

FAMILIES = ("proxy", "cancellation", "subgroup", "heart")


class TruthRow(BaseModel):
    path: str
    subgroup: str = ""
    effect: float


class GroundTruth(BaseModel):
    family: str
    target: str
    strength: float
    rows: List[TruthRow] = Field(default_factory=list)
    # subgroup predicate whose complement carries no effect, e.g. "age<40"
    subgroup: Optional[str] = None

    def effect(self, path: str, subgroup: str = "") -> float:
        for row in self.rows:
            if row.path == path and row.subgroup == subgroup:
                return row.effect
        raise KeyError((path, subgroup))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.dict() for row in self.rows], columns=["path", "subgroup", "effect"])


def save_truth(truth: GroundTruth, path) -> None:
    truth.to_frame().to_csv(path, index=False, lineterminator="\n")


class FailureMode(NamedTuple):
    data: Dataset
    graph: CausalGraph
    truth: GroundTruth
    sem: FittedSEM


def _eq(node: str, weights: Dict[str, float], intercept: float = 0.0, scale: float = 0.0, link: str = "identity", gates=None):
    parents = sorted(weights)
    return StructuralEquation(
        node=node,
        parents=parents,
        weights=[float(weights[p]) for p in parents],
        intercept=float(intercept),
        link=link,
        residual_scale=scale,
        gates=gates or {},
    )


def _logit(p: float) -> float:
    return math.log(p / (1 - p))


def _path_rows(graph: CausalGraph, sem: FittedSEM, subgroup: str = "") -> List[TruthRow]:
    """Path products plus DIRECT and TOTAL rows, ignoring gates."""
    rows = []
    direct = 0.0
    total = 0.0
    for path in enumerate_paths(graph, max_length=len(graph.nodes)).paths:
        effect = 1.0
        for src, dst in zip(path[:-1], path[1:]):
            eq = sem.equations[dst]
            effect *= eq.weights[eq.parents.index(src)]
        rows.append(TruthRow(path=path_label(path), subgroup=subgroup, effect=effect))
        total += effect
        if len(path) == 2:
            direct = effect
    # DIRECT is zero unless the graph carries target -> outcome
    rows.append(TruthRow(path="DIRECT", subgroup=subgroup, effect=direct))
    rows.append(TruthRow(path="TOTAL", subgroup=subgroup, effect=total))
    return rows


def _proxy(n: int, seed: int, s: float) -> FailureMode:
    graph = CausalGraph(
        nodes=[
            NodeSpec(name="smoking", role="target", kind="binary"),
            NodeSpec(name="bp"),
            NodeSpec(name="bmi"),
            NodeSpec(name="risk", role="outcome", kind="binary"),
        ],
        edges=[("smoking", "bp"), ("smoking", "bmi"), ("bp", "risk"), ("bmi", "risk")],
    )
    sem = FittedSEM(
        graph=graph,
        equations={
            "smoking": _eq("smoking", {}, intercept=_logit(0.4), link="logistic"),
            "bp": _eq("bp", {"smoking": 1.0 * s}, scale=1.0),
            "bmi": _eq("bmi", {"smoking": 0.8 * s}, scale=1.0),
            "risk": _eq("risk", {"bp": 1.0, "bmi": 1.0}, intercept=-1.8 * s * 0.4, link="logistic"),
        },
    )
    data = sample_synthetic(sem, n, seed)
    truth = GroundTruth(family="proxy", target="smoking", strength=s, rows=_path_rows(graph, sem))
    return FailureMode(data, graph, truth, sem)


def _cancellation(n: int, seed: int, s: float) -> FailureMode:
    graph = CausalGraph(
        nodes=[
            NodeSpec(name="education", role="target"),
            NodeSpec(name="cscore"),
            NodeSpec(name="escore"),
            NodeSpec(name="risk", role="outcome", kind="binary"),
        ],
        edges=[("education", "cscore"), ("education", "escore"), ("cscore", "risk"), ("escore", "risk")],
    )
    sem = FittedSEM(
        graph=graph,
        equations={
            "education": _eq("education", {}, scale=1.0),
            "cscore": _eq("cscore", {"education": s}, scale=1.0),
            "escore": _eq("escore", {"education": s}, scale=1.0),
            "risk": _eq("risk", {"cscore": -1.0, "escore": 1.0}, link="logistic"),
        },
    )
    data = sample_synthetic(sem, n, seed)
    truth = GroundTruth(family="cancellation", target="education", strength=s, rows=_path_rows(graph, sem))
    return FailureMode(data, graph, truth, sem)


def _subgroup(n: int, seed: int, s: float) -> FailureMode:
    rng = np.random.default_rng([seed, 1])
    age = np.clip(10.0 * np.rint(rng.normal(42.0, 12.0, n) / 10.0), 20.0, 80.0)
    cut = float(np.median(age))
    gates = {"exposure": Gate(gate="age", below=cut)}
    graph = CausalGraph(
        nodes=[
            NodeSpec(name="exposure", role="target", kind="binary"),
            NodeSpec(name="age"),
            NodeSpec(name="marker", gates=gates),
            NodeSpec(name="risk", role="outcome", kind="binary"),
        ],
        edges=[("exposure", "marker"), ("age", "marker"), ("marker", "risk"), ("age", "risk")],
    )
    sem = FittedSEM(
        graph=graph,
        equations={
            "exposure": _eq("exposure", {}, link="logistic"),
            "marker": _eq("marker", {"exposure": 0.45 * s, "age": 0.0}, scale=1.0, gates=gates),
            "risk": _eq("risk", {"marker": 1.0, "age": 0.02}, intercept=-0.02 * 42.0, link="logistic"),
        },
    )
    data = sample_synthetic(sem, n, seed, exogenous={"age": age})

    inside = f"age<{cut:g}"
    share = float(np.mean(age < cut))
    rows = []
    for row in _path_rows(graph, sem, subgroup=inside):
        rows.append(row)
        rows.append(TruthRow(path=row.path, subgroup=f"age>={cut:g}", effect=0.0))
        rows.append(TruthRow(path=row.path, effect=row.effect * share))
    truth = GroundTruth(family="subgroup", target="exposure", strength=s, rows=rows, subgroup=inside)
    logger.debug("subgroup family: cut=%g share below=%.3f", cut, share)
    return FailureMode(data, graph, truth, sem)


def _heart(n: int, seed: int, s: float) -> FailureMode:
    graph = CausalGraph(
        nodes=[
            NodeSpec(name="age"),
            NodeSpec(name="smoking", role="target", kind="binary"),
            NodeSpec(name="bp"),
            NodeSpec(name="bmi"),
            NodeSpec(name="risk", role="outcome", kind="binary"),
        ],
        edges=[
            ("age", "bp"),
            ("age", "bmi"),
            ("smoking", "bp"),
            ("smoking", "bmi"),
            ("smoking", "risk"),
            ("bp", "risk"),
            ("bmi", "risk"),
        ],
    )
    sem = FittedSEM(
        graph=graph,
        equations={
            "age": _eq("age", {}, intercept=50.0, scale=10.0),
            "smoking": _eq("smoking", {}, intercept=_logit(0.3), link="logistic"),
            "bp": _eq("bp", {"age": 0.5, "smoking": 8.0 * s}, intercept=120.0 - 0.5 * 50.0, scale=10.0),
            "bmi": _eq("bmi", {"age": 0.1, "smoking": 2.5 * s}, intercept=26.0 - 0.1 * 50.0, scale=3.0),
            "risk": _eq(
                "risk",
                {"bp": 0.06, "bmi": 0.15, "smoking": 0.5 * s},
                intercept=-0.06 * 120.0 - 0.15 * 26.0,
                link="logistic",
            ),
        },
    )
    data = sample_synthetic(sem, n, seed)
    truth = GroundTruth(family="heart", target="smoking", strength=s, rows=_path_rows(graph, sem))
    return FailureMode(data, graph, truth, sem)


_BUILDERS = {"proxy": _proxy, "cancellation": _cancellation, "subgroup": _subgroup, "heart": _heart}


def gen_failure_mode(family: str, n: int, seed: int, strength: float = 1.0) -> FailureMode:
    if family not in _BUILDERS:
        raise ConfigError(f"unknown family {family!r}; expected one of {', '.join(FAMILIES)}")
    if not strength > 0:
        raise ConfigError("strength must be > 0")
    mode = _BUILDERS[family](n, seed, float(strength))
    logger.info("generated %s family: %d rows, seed %d, strength %g", family, mode.data.n_rows, seed, strength)
    return mode
