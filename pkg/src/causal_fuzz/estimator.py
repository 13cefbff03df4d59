"""Monte-Carlo estimates of how much the target still moves the model output.

Each estimate draws reference rows with replacement, picks a contrast value for
the target, builds the counterfactual row through the SEM with a chosen set of
active edges, and averages |f(x') - f(x)| over the pairs. Signed changes are
multiplied by sign(z' - z) first, so a path that lowers the score as the target
rises reports a negative mean whichever way the contrast moved. Original-row scores
are cached per reference row for the whole run, so a repeated row costs one
query instead of two.
"""
import logging
import math
import operator
import re
import zlib
from typing import Dict, FrozenSet, List, NamedTuple, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from pydantic import BaseModel, Field, ValidationError, root_validator, validator
from typing_extensions import Literal

from causal_fuzz.data import Dataset
from causal_fuzz.errors import BudgetExhausted, ConfigError, GraphError, SubgroupTooSmall
from causal_fuzz.graph import DEFAULT_MAX_LENGTH, CausalGraph, Edge, PathSet, path_edges
from causal_fuzz.predictor import Predictor, QueryMeter, ScoreKind
from causal_fuzz.scm import FittedSEM, propagate

logger = logging.getLogger(__name__)

Z95 = 1.96
MIN_PAIRS = 20
MIN_SUBGROUP_ROWS = 30
CHUNK_PAIRS = 256

Status = Literal["ok", "inconclusive-budget", "structural-zero"]
Verdict = Literal["leak", "pass", "inconclusive", "inconclusive-budget", "structural-zero"]


class ContrastPolicy(BaseModel):
    mode: Literal["flip", "marginal", "fixed-delta"] = "marginal"
    delta: float = 1.0
    n_contrasts_per_row: int = 1

    class Config:
        allow_mutation = False

    @validator("delta")
    def _nonzero(cls, value: float) -> float:
        if value == 0:
            raise ValueError("delta must be non-zero")
        return value

    @validator("n_contrasts_per_row")
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("n_contrasts_per_row must be >= 1")
        return value

    def draw(self, z: np.ndarray, marginal: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.mode == "flip":
            return 1.0 - z
        if self.mode == "fixed-delta":
            return z + self.delta
        return marginal[rng.integers(0, len(marginal), len(z))]

    def describe(self) -> str:
        return f"fixed-delta({self.delta:g})" if self.mode == "fixed-delta" else self.mode


class BudgetSplit(BaseModel):
    total: float = 0.25
    direct: float = 0.25
    # set aside first, only when reference checks run inside the same budget
    baselines: float = 0.2
    # set aside next, only when subgroup predicates are configured
    subgroups: float = 0.2

    @root_validator(skip_on_failure=True)
    def _fractions(cls, values):
        for name in ("total", "direct", "subgroups", "baselines"):
            if not 0 <= values[name] < 1:
                raise ValueError(f"budget split {name} must lie in [0, 1)")
        if values["total"] + values["direct"] >= 1:
            raise ValueError("total + direct shares must leave budget for paths")
        return values


_OPS = {
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
    "==": operator.eq,
    "!=": operator.ne,
}
_NEGATE = {"<": ">=", ">=": "<", "<=": ">", ">": "<=", "==": "!=", "!=": "=="}
_PREDICATE_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_.\-]*?)\s*(<=|>=|==|<|>)\s*([^\s<>=]+)\s*$")


class SubgroupPredicate(BaseModel):
    column: str
    op: Literal["<", "<=", ">", ">=", "==", "!="]
    value: float

    class Config:
        allow_mutation = False

    @classmethod
    def parse(cls, text: str) -> "SubgroupPredicate":
        """`<column><op><number>` with op one of <, <=, >, >=, ==."""
        match = _PREDICATE_RE.match(text)
        if not match:
            raise ConfigError(f"bad subgroup predicate {text!r}; expected e.g. age<40")
        column, op, raw = match.groups()
        try:
            value = float(raw)
        except ValueError:
            raise ConfigError(f"bad number {raw!r} in subgroup predicate {text!r}") from None
        return cls(column=column, op=op, value=value)

    @property
    def label(self) -> str:
        return f"{self.column}{self.op}{self.value:g}"

    def complement(self) -> "SubgroupPredicate":
        return SubgroupPredicate(column=self.column, op=_NEGATE[self.op], value=self.value)

    def rows(self, data: Dataset) -> np.ndarray:
        return np.flatnonzero(_OPS[self.op](data.column(self.column), self.value))


class EffectEstimate(BaseModel):
    path_label: str
    mean_abs_change: float = 0.0
    std_error: float = 0.0
    ci95: Tuple[float, float] = (0.0, 0.0)
    signed_mean: float = 0.0
    signed_ci95: Tuple[float, float] = (0.0, 0.0)
    n_pairs: int = 0
    queries_used: int = 0
    subgroup_label: Optional[str] = None
    status: Status = "ok"

    class Config:
        allow_mutation = False

    def verdict(self, threshold: float) -> str:
        if self.status != "ok":
            return self.status
        if self.ci95[0] > threshold:
            return "leak"
        if self.ci95[1] < threshold:
            return "pass"
        return "inconclusive"


class FuzzConfig(BaseModel):
    graph: CausalGraph
    sem: FittedSEM
    predictor: Predictor
    # reference rows the Monte-Carlo average runs over
    data: Dataset
    target: str
    threshold: float = 0.05
    budget: int = 10000
    k: int = 3
    max_length: int = DEFAULT_MAX_LENGTH
    contrast: Optional[ContrastPolicy] = None
    score_kind: ScoreKind = "probability"
    subgroups: List[SubgroupPredicate] = Field(default_factory=list)
    # mediator sets whose outgoing edges are cut for an extra total estimate
    blocked: List[List[str]] = Field(default_factory=list)
    seed: int = 0
    split: BudgetSplit = Field(default_factory=BudgetSplit)

    class Config:
        arbitrary_types_allowed = True
        allow_mutation = False

    @validator("threshold")
    def _threshold(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("threshold must be > 0")
        return value

    @validator("budget", "seed")
    def _nonnegative(cls, value: int) -> int:
        if value < 0:
            raise ValueError("budget and seed must be >= 0")
        return value

    @validator("k", "max_length")
    def _at_least_one(cls, value: int) -> int:
        if value < 1:
            raise ValueError("k and max_length must be >= 1")
        return value

    @root_validator(skip_on_failure=True)
    def _consistent(cls, values):
        graph: CausalGraph = values["graph"]
        target = values["target"]
        if target not in graph.features:
            raise ValueError(f"target {target!r} is not a feature node of the graph")
        if graph.target != target:
            values["graph"] = graph = graph.with_target(target)
        if set(values["sem"].graph.edges) != set(graph.edges):
            raise ValueError("SEM was fitted over a different graph")
        data: Dataset = values["data"]
        for name in graph.features + list(values["predictor"].schema):
            if name not in data.columns:
                raise ValueError(f"column {name!r} missing from the reference data")
        for predicate in values["subgroups"]:
            if predicate.column not in data.columns:
                raise ValueError(f"subgroup column {predicate.column!r} missing from the reference data")
        for mediators in values["blocked"]:
            for name in mediators:
                if name not in graph.features or name == target:
                    raise ValueError(f"cannot block {name!r}: not a mediator candidate")
        contrast = values["contrast"]
        binary = graph.kind(target) == "binary"
        if contrast is None:
            values["contrast"] = ContrastPolicy(mode="flip" if binary else "marginal")
        elif contrast.mode == "flip" and not binary:
            raise ValueError("flip contrast requires a binary target")
        return values

    @classmethod
    def create(cls, **kwargs) -> "FuzzConfig":
        try:
            return cls(**kwargs)
        except ValidationError as e:
            raise ConfigError(e.errors()[0]["msg"]) from e


class Probe(NamedTuple):
    """Which edges carry the intervention and which features the model sees move."""

    label: str
    active_edges: FrozenSet[Edge]
    fed: FrozenSet[str]


def total_probe(config: FuzzConfig) -> Probe:
    return Probe("TOTAL", frozenset(config.graph.edges), frozenset(config.predictor.schema))


def direct_probe(config: FuzzConfig) -> Probe:
    return Probe("DIRECT", frozenset(), frozenset([config.target]))


def path_probe(config: FuzzConfig, paths: PathSet) -> Probe:
    graph = config.graph
    edges = set(graph.edges)
    for path in paths.paths:
        if path[0] != config.target or path[-1] != graph.outcome:
            raise GraphError(f"path {'→'.join(path)} does not run from {config.target} to {graph.outcome}")
        for edge in path_edges(path):
            if edge not in edges:
                raise GraphError(f"path uses missing edge {edge[0]} -> {edge[1]}")
    active = frozenset(paths.active_edges)
    fed = frozenset(src for src, dst in active if dst == graph.outcome)
    return Probe("+".join(paths.labels), active, fed)


def blocked_probe(config: FuzzConfig, blocked: Sequence[str]) -> Probe:
    cut = set(blocked)
    active = frozenset(e for e in config.graph.edges if e[0] not in cut)
    fed = frozenset(u for u in config.predictor.schema if u not in cut)
    return Probe(f"TOTAL|block:{','.join(sorted(cut))}", active, fed)


def reaches_model(config: FuzzConfig, probe: Probe) -> bool:
    """False when no feature the model reads can change under the probe."""
    moved = {config.target}
    sub = nx.DiGraph(list(probe.active_edges))
    if config.target in sub:
        moved.update(nx.descendants(sub, config.target))
    return bool(moved & probe.fed & set(config.predictor.schema))


class Scorer:
    """Runs pair batches against the predictor under one meter and score cache."""

    def __init__(self, config: FuzzConfig, meter: Optional[QueryMeter] = None):
        self.config = config
        self.meter = meter if meter is not None else QueryMeter(config.budget)
        self.cache: Dict[int, float] = {}
        self.target_index = config.data.index(config.target)

    def affordable(self, picks: np.ndarray, limit: int) -> int:
        """Largest prefix of `picks` whose queries fit in `limit`."""
        fresh = set()
        spent = 0
        for i, row in enumerate(picks.tolist()):
            cost = 1 + (row not in self.cache and row not in fresh)
            if spent + cost > limit:
                return i
            spent += cost
            if row not in self.cache:
                fresh.add(row)
        return len(picks)

    def changes(self, picks: np.ndarray, contrast: np.ndarray, probe: Probe) -> np.ndarray:
        config = self.config
        data = config.data
        observed = data.values[picks]
        cf = propagate(config.sem, data.columns, observed, {config.target: contrast}, probe.active_edges)
        model_input = observed.copy()
        for name in probe.fed:
            j = data.index(name)
            model_input[:, j] = cf[:, j]

        fresh = list(dict.fromkeys(row for row in picks.tolist() if row not in self.cache))
        if fresh:
            scores = config.predictor.predict(
                data.values[fresh], kind=config.score_kind, meter=self.meter, columns=data.columns
            )
            self.cache.update(zip(fresh, scores.tolist()))
        after = config.predictor.predict(model_input, kind=config.score_kind, meter=self.meter, columns=data.columns)
        before = np.array([self.cache[row] for row in picks.tolist()])
        return after - before


def _summarize(
    label: str, subgroup: Optional[str], diffs: np.ndarray, directions: np.ndarray, queries: int, status: str
) -> EffectEstimate:
    """`directions` is sign(z' - z) per pair; signed values are oriented by it and ties dropped."""
    n = len(diffs)
    if n == 0:
        return EffectEstimate(path_label=label, subgroup_label=subgroup, queries_used=queries, status=status)
    absolute = np.abs(diffs)
    mean = float(absolute.mean())
    se = float(absolute.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    moved = directions != 0
    oriented = diffs[moved] * directions[moved]
    signed = float(oriented.mean()) if len(oriented) else 0.0
    signed_se = float(oriented.std(ddof=1) / math.sqrt(len(oriented))) if len(oriented) > 1 else 0.0
    return EffectEstimate(
        path_label=label,
        mean_abs_change=mean,
        std_error=se,
        ci95=(mean - Z95 * se, mean + Z95 * se),
        signed_mean=signed,
        signed_ci95=(signed - Z95 * signed_se, signed + Z95 * signed_se),
        n_pairs=n,
        queries_used=queries,
        subgroup_label=subgroup,
        status=status,
    )


def estimate_probe(
    config: FuzzConfig,
    probe: Probe,
    n_pairs: int,
    scorer: Optional[Scorer] = None,
    rows: Optional[np.ndarray] = None,
    subgroup_label: Optional[str] = None,
) -> EffectEstimate:
    """Runs up to `n_pairs` counterfactual pairs, spending at most 2 queries each.

    Pairs come from a random stream keyed by (seed, probe label), so the same
    probe over the same rows draws the same pairs whatever else the run does.
    Running out of budget returns what was completed, flagged
    inconclusive-budget.
    """
    if not reaches_model(config, probe):
        logger.info("%s: no model input can change, structural zero", probe.label)
        return EffectEstimate(path_label=probe.label, subgroup_label=subgroup_label, status="structural-zero")

    scorer = scorer or Scorer(config)
    data = config.data
    pool = np.arange(data.n_rows) if rows is None else np.asarray(rows, dtype=int)
    key = zlib.crc32(probe.label.encode())
    row_rng = np.random.default_rng([config.seed, key, 0])
    contrast_rng = np.random.default_rng([config.seed, key, 1])

    contrast = config.contrast
    per_row = contrast.n_contrasts_per_row
    drawn = pool[row_rng.integers(0, len(pool), math.ceil(n_pairs / per_row))]
    picks = np.repeat(drawn, per_row)[:n_pairs]
    z = data.values[picks, scorer.target_index]
    z_new = contrast.draw(z, data.column(config.target), contrast_rng)
    directions = np.sign(z_new - z)

    used_before = scorer.meter.used
    allotment = 2 * n_pairs
    status = "ok"
    diffs: List[np.ndarray] = []
    done = 0
    for start in range(0, n_pairs, CHUNK_PAIRS):
        chunk = picks[start : start + CHUNK_PAIRS]
        spent = scorer.meter.used - used_before
        fits = scorer.affordable(chunk, min(scorer.meter.remaining, allotment - spent))
        if fits < len(chunk):
            status = "inconclusive-budget"
        if fits == 0:
            break
        try:
            diffs.append(scorer.changes(chunk[:fits], z_new[start : start + fits], probe))
            done += fits
        except BudgetExhausted as e:
            logger.warning("%s: %s", probe.label, e)
            status = "inconclusive-budget"
            break
        if status != "ok":
            break

    flat = np.concatenate(diffs) if diffs else np.empty(0)
    estimate = _summarize(
        probe.label, subgroup_label, flat, directions[:done], scorer.meter.used - used_before, status
    )
    logger.info(
        "%s%s: mean |change| %.4f over %d pairs, %d queries (%s)",
        probe.label,
        f" [{subgroup_label}]" if subgroup_label else "",
        estimate.mean_abs_change,
        estimate.n_pairs,
        estimate.queries_used,
        status,
    )
    return estimate


def _default_pairs(config: FuzzConfig, scorer: Optional[Scorer]) -> int:
    remaining = scorer.meter.remaining if scorer is not None else config.budget
    return remaining // 2


def estimate_path_effect(
    config: FuzzConfig, paths: PathSet, n_pairs: Optional[int] = None, scorer: Optional[Scorer] = None
) -> EffectEstimate:
    probe = path_probe(config, paths)
    return estimate_probe(config, probe, n_pairs or _default_pairs(config, scorer), scorer)


def estimate_total_effect(config: FuzzConfig, n_pairs: Optional[int] = None, scorer: Optional[Scorer] = None) -> EffectEstimate:
    return estimate_probe(config, total_probe(config), n_pairs or _default_pairs(config, scorer), scorer)


def estimate_direct_effect(
    config: FuzzConfig, n_pairs: Optional[int] = None, scorer: Optional[Scorer] = None
) -> EffectEstimate:
    """Only the target's own model input moves; zero with no queries if the model lacks it."""
    return estimate_probe(config, direct_probe(config), n_pairs or _default_pairs(config, scorer), scorer)


def estimate_blocked_effect(
    config: FuzzConfig, blocked: Sequence[str], n_pairs: Optional[int] = None, scorer: Optional[Scorer] = None
) -> EffectEstimate:
    return estimate_probe(config, blocked_probe(config, blocked), n_pairs or _default_pairs(config, scorer), scorer)


def subgroup_rows(config: FuzzConfig, predicate: SubgroupPredicate) -> np.ndarray:
    rows = predicate.rows(config.data)
    if len(rows) < MIN_SUBGROUP_ROWS:
        raise SubgroupTooSmall(predicate.label, len(rows), MIN_SUBGROUP_ROWS)
    return rows


def estimate_subgroup_effects(
    config: FuzzConfig,
    predicate: SubgroupPredicate,
    n_pairs: Optional[int] = None,
    scorer: Optional[Scorer] = None,
    probe: Optional[Probe] = None,
) -> List[EffectEstimate]:
    """Total effect inside the subgroup, then inside its complement when that is large enough."""
    rows = subgroup_rows(config, predicate)
    probe = probe or total_probe(config)
    scorer = scorer or Scorer(config)
    outside = predicate.complement()
    rest = outside.rows(config.data)
    groups = [(predicate, rows)]
    if len(rest) >= MIN_SUBGROUP_ROWS:
        groups.append((outside, rest))
    else:
        logger.info("complement %s has %d rows, not estimated", outside.label, len(rest))
    pairs = n_pairs or _default_pairs(config, scorer) // len(groups)
    return [estimate_probe(config, probe, pairs, scorer, rows=r, subgroup_label=p.label) for p, r in groups]
