"""Reference influence checks reported next to the causal estimates."""
import itertools
import logging
import math
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel
from scipy.stats import rankdata
from typing_extensions import Literal

from causal_fuzz.data import Dataset
from causal_fuzz.errors import ConfigError, DataError, SchemaMismatch
from causal_fuzz.predictor import Predictor, QueryMeter

logger = logging.getLogger(__name__)

Metric = Literal["accuracy", "auc"]
BACKGROUND_ROWS = 100


def accuracy(y: np.ndarray, scores: np.ndarray, cut: float = 0.5) -> float:
    return float(np.mean((scores >= cut) == (y == 1)))


def auc(y: np.ndarray, scores: np.ndarray) -> float:
    """Mann-Whitney rank statistic with average ranks for ties."""
    positives = y == 1
    n1 = int(positives.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise DataError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[positives].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


_METRICS = {"accuracy": accuracy, "auc": auc}


class PermutationImportance(BaseModel):
    feature: str
    metric: Metric
    mean_drop: float
    std: float
    n_repeats: int
    # the feature is not a model input, so shuffling it cannot matter
    structural_zero: bool = False


def permutation_importance(
    p: Predictor,
    data: Dataset,
    feature: str,
    outcome: str,
    metric: str = "accuracy",
    n_repeats: int = 10,
    seed: int = 0,
    exhaustive: bool = False,
    meter: Optional[QueryMeter] = None,
) -> PermutationImportance:
    """Mean metric drop when `feature` is shuffled.

    With `exhaustive` every permutation of the rows is scored once, which is
    only sensible for tiny datasets.
    """
    if metric not in _METRICS:
        raise ConfigError(f"unknown metric {metric!r}")
    if feature not in p.schema:
        return PermutationImportance(
            feature=feature, metric=metric, mean_drop=0.0, std=0.0, n_repeats=0, structural_zero=True
        )
    score = _METRICS[metric]
    y = data.column(outcome)
    base = score(y, p.predict(data.values, meter=meter, columns=data.columns))
    j = data.index(feature)

    if exhaustive:
        orders = [np.array(order) for order in itertools.permutations(range(data.n_rows))]
    else:
        rng = np.random.default_rng(seed)
        orders = [rng.permutation(data.n_rows) for _ in range(n_repeats)]

    drops = []
    for order in orders:
        shuffled = data.values.copy()
        shuffled[:, j] = data.values[order, j]
        drops.append(base - score(y, p.predict(shuffled, meter=meter, columns=data.columns)))
    drops = np.asarray(drops)
    return PermutationImportance(
        feature=feature,
        metric=metric,
        mean_drop=float(drops.mean()),
        std=float(drops.std(ddof=1)) if len(drops) > 1 else 0.0,
        n_repeats=len(drops),
    )


class ShapleyValues(BaseModel):
    features: List[str]
    values: List[float]
    std_errors: List[float]
    n_permutations: int

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.features, self.values))


def background_rows(data: Dataset, n: int = BACKGROUND_ROWS, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    take = min(n, data.n_rows)
    return data.values[rng.choice(data.n_rows, size=take, replace=False)]


def shapley_mc(
    p: Predictor,
    background: np.ndarray,
    row: np.ndarray,
    n_permutations: int = 200,
    seed: int = 0,
    exhaustive: bool = False,
    kind: str = "raw",
    meter: Optional[QueryMeter] = None,
) -> ShapleyValues:
    """Permutation-sampling Shapley values for one row, in schema order.

    Features not yet added take each background row's own values and the model
    output is averaged over the background, so every ordering telescopes to
    f(row) - mean f(background).
    """
    background = np.atleast_2d(np.asarray(background, dtype=float))
    row = np.asarray(row, dtype=float).ravel()
    d = len(p.schema)
    if background.shape[0] < 1:
        raise DataError("background needs at least one row")
    if background.shape[1] != d or row.shape[0] != d:
        raise SchemaMismatch(f"expected {d} features in schema order")

    if exhaustive:
        orders = [list(order) for order in itertools.permutations(range(d))]
    else:
        rng = np.random.default_rng(seed)
        orders = [rng.permutation(d).tolist() for _ in range(n_permutations)]

    m = background.shape[0]
    contributions = np.zeros((len(orders), d))
    for i, order in enumerate(orders):
        # stack background, then background with 1, 2, ... features switched to `row`
        stacked = np.repeat(background[None, :, :], d + 1, axis=0)
        for step, j in enumerate(order, start=1):
            stacked[step:, :, j] = row[j]
        means = p.predict(stacked.reshape(-1, d), kind=kind, meter=meter).reshape(d + 1, m).mean(axis=1)
        contributions[i, order] = np.diff(means)

    values = contributions.mean(axis=0)
    n = len(orders)
    se = contributions.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(d)
    return ShapleyValues(features=list(p.schema), values=values.tolist(), std_errors=se.tolist(), n_permutations=n)


def demographic_parity_gap(
    p: Predictor,
    data: Dataset,
    group: str,
    threshold: float = 0.5,
    kind: str = "probability",
    meter: Optional[QueryMeter] = None,
) -> float:
    if data.kinds.get(group) != "binary":
        raise DataError(f"group column {group!r} must be binary")
    g = data.column(group)
    if np.all(g == g[0]):
        raise DataError(f"group column {group!r} has a single group")
    positive = p.predict(data.values, kind=kind, meter=meter, columns=data.columns) >= threshold
    return float(abs(positive[g == 1].mean() - positive[g == 0].mean()))


class BaselineSizes(BaseModel):
    # rows scored by permutation importance and demographic parity; None scores every row
    rows: Optional[int] = None
    n_repeats: int = 10
    n_explain: int = 20
    n_permutations: int = 50
    background: int = BACKGROUND_ROWS

    def queries(self, n_rows: int, d: int, permutation: bool, shapley: bool, parity: bool) -> int:
        """Exact number of model calls the selected checks make at these sizes."""
        rows = n_rows if self.rows is None else min(self.rows, n_rows)
        count = 0
        if permutation:
            count += rows * (1 + self.n_repeats)
        if shapley:
            count += min(self.n_explain, n_rows) * self.n_permutations * (d + 1) * min(self.background, n_rows)
        if parity:
            count += rows
        return count

    def within(self, budget: int, n_rows: int, d: int, permutation: bool, shapley: bool, parity: bool) -> "BaselineSizes":
        """Shrinks the sizes so the selected checks share `budget` evenly."""
        active = int(permutation) + int(shapley) + int(parity)
        part = budget // active if active else 0
        rows = n_rows if self.rows is None else min(self.rows, n_rows)
        if permutation:
            rows = min(rows, part // (1 + self.n_repeats))
        if parity:
            rows = min(rows, part)
        background = min(self.background, n_rows)
        n_explain = min(self.n_explain, n_rows)
        if shapley:
            per_pass = self.n_permutations * (d + 1)
            background = min(background, part // per_pass)
            n_explain = min(n_explain, part // (per_pass * background)) if background else 0
        return self.copy(update={"rows": rows, "background": background, "n_explain": n_explain})


_SKIPPED = "no query budget left"


def run_baselines(
    p: Predictor,
    data: Dataset,
    target: str,
    outcome: Optional[str] = None,
    group: Optional[str] = None,
    seed: int = 0,
    sizes: Optional[BaselineSizes] = None,
    meter: Optional[QueryMeter] = None,
    budget: Optional[int] = None,
) -> Dict[str, object]:
    """Summary embedded under "baselines" in the leakage report.

    With `budget` the sample sizes shrink until all checks fit in that many
    queries; a check left with nothing to score is reported as skipped.
    """
    sizes = sizes or BaselineSizes()
    group = group or (target if data.kinds.get(target) == "binary" else None)
    permutation = outcome is not None and outcome in data.columns
    uses_target = target in p.schema
    parity = group is not None and group in data.columns
    if budget is not None:
        sizes = sizes.within(budget, data.n_rows, len(p.schema), permutation and uses_target, uses_target, parity)
    before = meter.used if meter is not None else 0

    sample = data
    if sizes.rows is not None and sizes.rows < data.n_rows:
        sample = data.take(np.random.default_rng(seed).choice(data.n_rows, sizes.rows, replace=False))

    summary: Dict[str, object] = {}
    if permutation:
        if uses_target and sample.n_rows == 0:
            summary["permutation_importance"] = {"feature": target, "skipped": _SKIPPED}
        else:
            pi = permutation_importance(p, sample, target, outcome, n_repeats=sizes.n_repeats, seed=seed, meter=meter)
            summary["permutation_importance"] = pi.dict()

    if not uses_target:
        summary["shapley"] = {"feature": target, "mean_abs": 0.0, "structural_zero": True, "rows": 0}
    elif sizes.n_explain == 0 or sizes.background == 0:
        summary["shapley"] = {"feature": target, "skipped": _SKIPPED}
    else:
        background = p.align(background_rows(data, n=sizes.background, seed=seed), data.columns)
        explained = p.align(background_rows(data, n=sizes.n_explain, seed=seed + 1), data.columns)
        values = np.array(
            [
                shapley_mc(
                    p, background, x, n_permutations=sizes.n_permutations, seed=seed, kind="probability", meter=meter
                ).values
                for x in explained
            ]
        )
        mean_abs = np.abs(values).mean(axis=0)
        summary["shapley"] = {
            "feature": target,
            "mean_abs": float(mean_abs[p.schema.index(target)]),
            "structural_zero": False,
            "rows": len(explained),
        }

    if parity:
        if sample.n_rows == 0:
            summary["demographic_parity_gap"] = {"group": group, "skipped": _SKIPPED}
        else:
            try:
                summary["demographic_parity_gap"] = {
                    "group": group,
                    "gap": demographic_parity_gap(p, sample, group, meter=meter),
                }
            except DataError as e:
                logger.warning("skipping demographic parity: %s", e)
    if meter is not None:
        summary["queries"] = meter.used - before
    logger.info("baselines for %s: %s", target, sorted(summary))
    return summary
