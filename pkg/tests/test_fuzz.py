import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from causal_fuzz.errors import ConfigError
from causal_fuzz.estimator import ContrastPolicy, FuzzConfig, SubgroupPredicate
from causal_fuzz.fuzz import plan_budget, run_causal_fuzz
from causal_fuzz.predictor import LinearPredictor, Predictor, QueryMeter, train_builtin
from causal_fuzz.report import render
from causal_fuzz.scm import sample_synthetic

from conftest import make_graph, make_sem


def by_path(report, subgroup=None):
    return {e.path: e for e in report.entries if e.subgroup == subgroup}


def test_proxy_leak_is_found(proxy):
    report = proxy.run()
    entries = by_path(report)
    assert report.overall == "leak"
    assert entries["TOTAL"].verdict == "leak"
    assert entries["DIRECT"].verdict == "structural-zero"
    assert entries["DIRECT"].queries == 0
    assert entries["smoking→bp→risk"].verdict == "leak"
    assert entries["smoking→bmi→risk"].verdict == "leak"
    assert set(report.header.flagged_mediators) == {"bp", "bmi"}
    assert report.header.budget_used <= 10000
    assert sum(e.queries for e in report.entries) == report.header.budget_used


def test_cancelling_paths_hide_behind_small_total(cancellation):
    report = cancellation.run(contrast=ContrastPolicy(mode="fixed-delta", delta=1.0))
    entries = by_path(report)
    total = entries["TOTAL"]
    through_c = entries["education→cscore→risk"]
    through_e = entries["education→escore→risk"]
    assert abs(total.signed_mean) < 0.02
    for entry in (through_c, through_e):
        assert entry.effect >= 0.10
        assert entry.effect >= 5 * total.effect
        assert entry.verdict == "leak"
    assert through_c.signed_mean < 0 < through_e.signed_mean
    assert report.overall == "leak"


def test_subgroup_leak_is_localized(subgroup):
    inside = subgroup.mode.truth.subgroup
    report = subgroup.run(subgroups=[SubgroupPredicate.parse(inside)])
    overall = by_path(report)["TOTAL"]
    local = by_path(report, inside)["TOTAL"]
    outside = [e for e in report.entries if e.subgroup not in (None, inside)]
    assert local.verdict == "leak"
    assert local.effect >= 2 * overall.effect
    assert overall.verdict in ("pass", "inconclusive")
    assert len(outside) == 1
    assert outside[0].ci[0] <= 0.0 <= outside[0].ci[1]


def test_runs_are_reproducible(proxy):
    first = render(proxy.run(seed=3))
    second = render(proxy.run(seed=3))
    assert first == second
    assert first != render(proxy.run(seed=4))


def test_no_path_report():
    graph = make_graph([("A", "Y"), ("Z", "B")])
    sem = make_sem(graph, {("Z", "B"): 1.0}, scales={"B": 1.0})
    data = sample_synthetic(sem, 200, seed=0)
    config = FuzzConfig.create(
        graph=graph, sem=sem, predictor=LinearPredictor.manual(["A", "B"], [1.0, 1.0]), data=data, target="Z"
    )
    meter = QueryMeter(100)
    report = run_causal_fuzz(config, meter=meter)
    assert report.header.status == "no-path"
    assert report.entries == []
    assert report.overall == "pass"
    assert meter.used == 0
    assert "no paths" in render(report, "text")


def test_small_meter_yields_inconclusive_budget(proxy):
    meter = QueryMeter(300)
    report = run_causal_fuzz(proxy.config(), meter=meter)
    assert meter.used <= 300
    assert report.header.budget_used == meter.used
    assert any(e.verdict == "inconclusive-budget" for e in report.entries)
    assert report.overall in ("leak", "inconclusive")


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.integers(0, 3000))
def test_budget_is_respected_or_refused(proxy, budget):
    config = proxy.config(budget=budget)
    if budget < 160:
        with pytest.raises(ConfigError, match="below the minimum"):
            run_causal_fuzz(config)
        return
    report = run_causal_fuzz(config)
    assert report.header.budget_used <= budget


def test_plan_moves_direct_share_to_paths(proxy):
    config = proxy.config(budget=1000)
    live = plan_budget(config, [0.5, 0.5], direct_live=True, n_blocked=0, n_groups=0)
    dead = plan_budget(config, [0.5, 0.5], direct_live=False, n_blocked=0, n_groups=0)
    assert live.total == dead.total == 125
    assert live.direct == 125
    assert dead.direct == 0
    assert sum(dead.paths) > sum(live.paths)
    assert dead.queries <= 1000
    assert live.queries <= 1000


def test_plan_weights_paths_by_score(proxy):
    plan = plan_budget(proxy.config(budget=4000), [0.9, 0.1], direct_live=False, n_blocked=0, n_groups=0)
    assert plan.paths[0] > plan.paths[1] >= 20


def test_plan_reserves_subgroup_share(proxy):
    plan = plan_budget(proxy.config(budget=10000), [1.0], direct_live=False, n_blocked=1, n_groups=2)
    assert plan.subgroup == 500
    assert plan.blocked == plan.total
    assert plan.queries <= 10000


def test_skipped_subgroup_is_reported(proxy):
    report = proxy.run(subgroups=[SubgroupPredicate.parse("bp<-100")])
    assert report.header.skipped_subgroups == ["bp<-100 (0 rows)"]
    assert all(e.subgroup is None for e in report.entries)


def test_blocking_both_mediators_cuts_the_leak(proxy):
    report = proxy.run(blocked=[["bp", "bmi"], ["bp"]])
    entries = by_path(report)
    assert entries["TOTAL|block:bmi,bp"].verdict == "structural-zero"
    assert entries["TOTAL|block:bp"].effect < entries["TOTAL"].effect
    assert entries["TOTAL|block:bp"].verdict == "leak"


def test_baselines_are_embedded(proxy):
    report = run_causal_fuzz(proxy.config(), with_baselines=True, outcome="risk")
    baselines = report.baselines
    assert baselines["permutation_importance"]["structural_zero"] is True
    assert baselines["shapley"]["structural_zero"] is True
    # the unlearned model still scores smokers differently
    assert baselines["demographic_parity_gap"]["gap"] > 0.0


class CountingPredictor(Predictor):
    """Counts every row the wrapped model scores, metered or not."""

    def __init__(self, inner):
        self.inner = inner
        self.schema = list(inner.schema)
        self.backing = inner.backing
        self.rows = 0

    @property
    def model_id(self):
        return self.inner.model_id

    def _score(self, rows, kind):
        self.rows += len(rows)
        return self.inner._score(rows, kind)


def counted_config(scenario, predictor, **kwargs):
    counting = CountingPredictor(predictor)
    config = FuzzConfig.create(
        graph=scenario.graph, sem=scenario.sem, predictor=counting, data=scenario.data, target=scenario.target, **kwargs
    )
    return counting, config


@pytest.fixture(scope="module")
def full_proxy_model(proxy):
    return train_builtin(proxy.data, "risk", ["smoking", "bp", "bmi"])


@pytest.mark.parametrize("which", ["unlearned", "full"])
def test_baselines_stay_inside_the_budget(proxy, full_proxy_model, which):
    model = proxy.predictor if which == "unlearned" else full_proxy_model
    counting, config = counted_config(proxy, model, budget=4000)
    report = run_causal_fuzz(config, with_baselines=True, outcome="risk")
    assert counting.rows == report.header.budget_used <= 4000
    assert report.baselines["queries"] > 0
    assert sum(e.queries for e in report.entries) + report.baselines["queries"] == report.header.budget_used
    if which == "full":
        assert report.baselines["shapley"]["rows"] >= 1
        assert report.baselines["permutation_importance"]["n_repeats"] == 10


def test_small_budget_is_refused_before_any_query(proxy):
    counting, config = counted_config(proxy, proxy.predictor, budget=50)
    with pytest.raises(ConfigError, match="below the minimum"):
        run_causal_fuzz(config, with_baselines=True, outcome="risk")
    assert counting.rows == 0


def test_plan_reserves_baselines_share(proxy):
    plan = plan_budget(proxy.config(budget=10000), [1.0], direct_live=False, n_blocked=0, n_groups=2, with_baselines=True)
    assert plan.baselines == 2000
    assert plan.subgroup == 400
    assert plan.total == 800
    assert plan.queries <= 10000


def test_cancellation_signs_show_under_default_contrast(cancellation):
    report = cancellation.run()
    assert report.header.contrast == "marginal"
    entries = by_path(report)
    through_c = entries["education→cscore→risk"]
    through_e = entries["education→escore→risk"]
    assert through_c.signed_mean < 0 < through_e.signed_mean
    smaller = min(abs(through_c.signed_mean), abs(through_e.signed_mean))
    assert smaller >= 0.05
    assert abs(entries["TOTAL"].signed_mean) < 0.25 * smaller


def test_report_lists_untested_paths(proxy):
    tested_all = proxy.run()
    assert tested_all.header.paths_enumerated == 2
    assert tested_all.header.paths_untested == []

    report = proxy.run(k=1)
    assert report.header.paths_enumerated == 2
    (untested,) = report.header.paths_untested
    assert untested in ("smoking→bp→risk", "smoking→bmi→risk")
    assert untested not in by_path(report)
    text = render(report, "text")
    assert "paths: 2 enumerated, 1 tested" in text
    assert f"untested paths: {untested}" in text


@settings(max_examples=200, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(
    budget=st.integers(0, 3000),
    k=st.integers(1, 4),
    max_length=st.integers(1, 4),
    contrast=st.sampled_from([None, ContrastPolicy(mode="fixed-delta", delta=0.5)]),
    seed=st.integers(0, 2**16),
    subgroups=st.sampled_from([[], ["Z<0"], ["M>=1", "F<-2"]]),
    blocked=st.sampled_from([[], [["M"]], [["M", "F"]]]),
    with_baselines=st.booleans(),
    meter_cap=st.one_of(st.none(), st.integers(0, 3000)),
)
def test_randomized_runs_never_overspend(
    linear_graph, linear_sem, linear_data, budget, k, max_length, contrast, seed, subgroups, blocked, with_baselines,
    meter_cap,
):
    counting = CountingPredictor(LinearPredictor.manual(["Z", "M", "F"], [0.7, 0.3, 1.2]))
    config = FuzzConfig.create(
        graph=linear_graph,
        sem=linear_sem,
        predictor=counting,
        data=linear_data,
        target="Z",
        budget=budget,
        k=k,
        max_length=max_length,
        contrast=contrast,
        seed=seed,
        subgroups=[SubgroupPredicate.parse(text) for text in subgroups],
        blocked=blocked,
    )
    # a meter smaller than the plan forces exhaustion mid-run
    meter = QueryMeter(min(budget, meter_cap)) if meter_cap is not None else None
    try:
        report = run_causal_fuzz(config, meter=meter, with_baselines=with_baselines)
    except ConfigError as e:
        assert "below the minimum" in str(e)
        assert counting.rows == 0
        return
    assert counting.rows == report.header.budget_used <= budget
    if meter is not None:
        assert meter.used <= meter.budget
    spent = sum(e.queries for e in report.entries) + report.baselines.get("queries", 0)
    assert spent == report.header.budget_used
