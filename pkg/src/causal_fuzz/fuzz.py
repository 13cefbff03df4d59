"""A complete audit run: scope, prioritize, allocate, estimate, report."""
import logging
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from causal_fuzz.baselines import run_baselines
from causal_fuzz.errors import ConfigError
from causal_fuzz.estimator import (
    MIN_PAIRS,
    MIN_SUBGROUP_ROWS,
    EffectEstimate,
    FuzzConfig,
    Scorer,
    SubgroupPredicate,
    blocked_probe,
    direct_probe,
    estimate_probe,
    path_probe,
    reaches_model,
    total_probe,
)
from causal_fuzz.graph import ARROW, PathSet, enumerate_paths, prioritize_paths
from causal_fuzz.predictor import QueryMeter
from causal_fuzz.report import LeakageReport, assemble
from causal_fuzz.scm import edge_support

logger = logging.getLogger(__name__)


class Plan(BaseModel):
    """Pairs per estimate; each pair is allotted two queries."""

    total: int = 0
    blocked: int = 0
    direct: int = 0
    paths: List[int] = Field(default_factory=list)
    # per estimated group (a subgroup or its complement)
    subgroup: int = 0
    groups: int = 0
    # queries, not pairs, held back for the reference checks
    baselines: int = 0

    @property
    def queries(self) -> int:
        pairs = self.total + self.blocked + self.direct + sum(self.paths) + self.subgroup * self.groups
        return 2 * pairs + self.baselines


def plan_budget(
    config: FuzzConfig,
    scores: List[float],
    direct_live: bool,
    n_blocked: int,
    n_groups: int,
    with_baselines: bool = False,
) -> Plan:
    """Splits the budget; ConfigError when any estimate would get fewer than MIN_PAIRS pairs."""
    split = config.split
    budget = config.budget
    base_q = int(split.baselines * budget) if with_baselines else 0
    sub_q = int(split.subgroups * (budget - base_q)) if n_groups else 0
    rest = budget - base_q - sub_q
    total_q = int(split.total * rest)
    direct_q = int(split.direct * rest) if direct_live else 0
    path_q = rest - total_q - direct_q

    plan = Plan()
    if scores:
        available = path_q // 2
        extra = available - MIN_PAIRS * len(scores)
        if extra < 0:
            raise ConfigError(
                f"budget {budget} is below the minimum: {len(scores)} paths need {MIN_PAIRS} pairs each"
            )
        weights = np.asarray(scores, dtype=float)
        weights = weights / weights.sum() if weights.sum() > 0 else np.full(len(scores), 1.0 / len(scores))
        plan.paths = [MIN_PAIRS + int(extra * w) for w in weights]
    else:
        total_q += path_q

    plan.total = (total_q // 2) // (1 + n_blocked)
    plan.blocked = plan.total if n_blocked else 0
    plan.direct = direct_q // 2
    plan.subgroup = (sub_q // 2) // n_groups if n_groups else 0
    plan.groups = n_groups
    plan.baselines = base_q

    short = [
        name
        for name, pairs, used in (
            ("TOTAL", plan.total, True),
            ("DIRECT", plan.direct, direct_live),
            ("subgroups", plan.subgroup, n_groups > 0),
        )
        if used and pairs < MIN_PAIRS
    ]
    if short:
        raise ConfigError(f"budget {budget} is below the minimum of {MIN_PAIRS} pairs for {', '.join(short)}")
    plan.blocked *= n_blocked
    return plan


def _subgroup_groups(config: FuzzConfig) -> Tuple[List[Tuple[SubgroupPredicate, np.ndarray]], List[str]]:
    groups = []
    skipped = []
    for predicate in config.subgroups:
        rows = predicate.rows(config.data)
        if len(rows) < MIN_SUBGROUP_ROWS:
            skipped.append(f"{predicate.label} ({len(rows)} rows)")
            continue
        groups.append((predicate, rows))
        outside = predicate.complement()
        rest = outside.rows(config.data)
        if len(rest) >= MIN_SUBGROUP_ROWS:
            groups.append((outside, rest))
        else:
            skipped.append(f"{outside.label} ({len(rest)} rows)")
    return groups, skipped


def _run_baselines(config: FuzzConfig, meter: QueryMeter, share: int, outcome: Optional[str]):
    budget = min(share, meter.remaining)
    logger.info("reference checks within %d queries", budget)
    return run_baselines(
        config.predictor, config.data, config.target, outcome=outcome, seed=config.seed, meter=meter, budget=budget
    )


def run_causal_fuzz(
    config: FuzzConfig,
    meter: Optional[QueryMeter] = None,
    with_baselines: bool = False,
    outcome: Optional[str] = None,
) -> LeakageReport:
    """Plans the whole budget before the first query; reference checks run last, from their own share."""
    logger.info("causal fuzz: target=%s budget=%d seed=%d", config.target, config.budget, config.seed)
    meter = meter if meter is not None else QueryMeter(config.budget)
    used_before = meter.used
    weak = [f"{e.src}{ARROW}{e.dst}" for e in edge_support(config.sem)]

    found = enumerate_paths(config.graph, config.max_length)
    if not len(found):
        logger.info("no path from %s to %s", config.target, config.graph.outcome)
        share = int(config.split.baselines * config.budget)
        baselines = _run_baselines(config, meter, share, outcome) if with_baselines else None
        used = meter.used - used_before
        return assemble([], baselines, config, budget_used=used, status="no-path", weak_edges=weak)
    ranked = prioritize_paths(found, config.data, len(found))
    top = PathSet(paths=ranked.paths[: config.k], scores=ranked.scores[: config.k])
    untested = ranked.labels[config.k :]
    logger.info("%d paths enumerated, top %d: %s", len(found), len(top), ", ".join(top.labels))

    path_probes = [path_probe(config, top.single(i)) for i in range(len(top))]
    live = [reaches_model(config, probe) for probe in path_probes]
    direct = direct_probe(config)
    direct_live = reaches_model(config, direct)
    groups, skipped = _subgroup_groups(config)
    plan = plan_budget(
        config,
        [score for score, ok in zip(top.scores, live) if ok],
        direct_live,
        len(config.blocked),
        len(groups),
        with_baselines=with_baselines,
    )
    logger.debug("budget plan: %s", plan)

    scorer = Scorer(config, meter)
    estimates: List[EffectEstimate] = [estimate_probe(config, total_probe(config), plan.total, scorer)]
    estimates.append(estimate_probe(config, direct, plan.direct, scorer))
    for mediators in config.blocked:
        per_set = plan.blocked // len(config.blocked)
        estimates.append(estimate_probe(config, blocked_probe(config, mediators), per_set, scorer))
    shares = iter(plan.paths)
    for probe, ok in zip(path_probes, live):
        estimates.append(estimate_probe(config, probe, next(shares) if ok else 0, scorer))
    for predicate, rows in groups:
        estimates.append(
            estimate_probe(config, total_probe(config), plan.subgroup, scorer, rows=rows, subgroup_label=predicate.label)
        )

    baselines = _run_baselines(config, meter, plan.baselines, outcome) if with_baselines else None
    used = meter.used - used_before
    report = assemble(
        estimates,
        baselines,
        config,
        budget_used=used,
        weak_edges=weak,
        skipped_subgroups=skipped,
        paths_enumerated=len(found),
        paths_untested=untested,
    )
    logger.info("budget used %d of %d; overall verdict %s", used, config.budget, report.overall)
    return report
