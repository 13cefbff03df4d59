"""Leakage reports: assembly, rendering, parsing and diffing across runs."""
import json
import logging
import math
from typing import Any, Dict, List, Optional, Sequence, Tuple

from pydantic import BaseModel, Field, ValidationError
from typing_extensions import Literal

from causal_fuzz.errors import ReportError, read_text
from causal_fuzz.estimator import Z95, EffectEstimate, FuzzConfig
from causal_fuzz.graph import ARROW

logger = logging.getLogger(__name__)

REPORT_VERSION = 1
PROPAGATION = "residual-preserving, edge-activation"
AVERAGING = "empirical reference distribution"

GLYPHS = {
    "leak": "✗",
    "pass": "✓",
    "inconclusive": "?",
    "inconclusive-budget": "…",
    "structural-zero": "∅",
}

Overall = Literal["leak", "pass", "inconclusive"]


class Header(BaseModel):
    target: str
    model_id: str
    score_kind: str
    threshold: float
    budget: int
    budget_used: int
    seed: int
    propagation: str = PROPAGATION
    averaging: str = AVERAGING
    contrast: str
    status: Literal["ok", "no-path"] = "ok"
    paths_enumerated: int = 0
    # enumerated paths left out by the top-k cut, in priority order
    paths_untested: List[str] = Field(default_factory=list)
    flagged_mediators: List[str] = Field(default_factory=list)
    weak_edges: List[str] = Field(default_factory=list)
    skipped_subgroups: List[str] = Field(default_factory=list)

    class Config:
        extra = "forbid"


class Entry(BaseModel):
    path: str
    effect: float
    ci: Tuple[float, float]
    signed_mean: float
    n_pairs: int
    queries: int
    verdict: Literal["leak", "pass", "inconclusive", "inconclusive-budget", "structural-zero"]
    subgroup: Optional[str] = None

    class Config:
        extra = "forbid"

    @property
    def std_error(self) -> float:
        return (self.ci[1] - self.ci[0]) / (2 * Z95)


class LeakageReport(BaseModel):
    report_version: Literal[1] = REPORT_VERSION
    header: Header
    entries: List[Entry] = Field(default_factory=list)
    baselines: Dict[str, Any] = Field(default_factory=dict)
    overall: Overall = "pass"

    class Config:
        extra = "forbid"

    @property
    def leaks(self) -> List[Entry]:
        return [e for e in self.entries if e.verdict == "leak"]


def _entry(estimate: EffectEstimate, threshold: float) -> Entry:
    return Entry(
        path=estimate.path_label,
        effect=estimate.mean_abs_change,
        ci=estimate.ci95,
        signed_mean=estimate.signed_mean,
        n_pairs=estimate.n_pairs,
        queries=estimate.queries_used,
        verdict=estimate.verdict(threshold),
        subgroup=estimate.subgroup_label,
    )


def interior_nodes(label: str) -> List[str]:
    """Mediators of a path label; aggregate labels such as TOTAL have none."""
    nodes = []
    for path in label.split("+"):
        hops = path.split(ARROW)
        nodes.extend(hops[1:-1])
    return nodes


def flagged_mediators(entries: Sequence[Entry]) -> List[str]:
    best: Dict[str, float] = {}
    for entry in entries:
        if entry.verdict != "leak":
            continue
        for node in interior_nodes(entry.path):
            best[node] = max(best.get(node, 0.0), entry.effect)
    return sorted(best, key=lambda node: (-best[node], node))


def overall_verdict(entries: Sequence[Entry]) -> str:
    verdicts = {e.verdict for e in entries}
    if "leak" in verdicts:
        return "leak"
    if verdicts & {"inconclusive", "inconclusive-budget"}:
        return "inconclusive"
    return "pass"


def assemble(
    estimates: Sequence[EffectEstimate],
    baselines: Optional[Dict[str, Any]],
    config: FuzzConfig,
    budget_used: int,
    status: str = "ok",
    weak_edges: Sequence[str] = (),
    skipped_subgroups: Sequence[str] = (),
    paths_enumerated: int = 0,
    paths_untested: Sequence[str] = (),
) -> LeakageReport:
    entries = [_entry(e, config.threshold) for e in estimates]
    entries.sort(key=lambda e: (-e.effect, e.path, e.subgroup or ""))
    header = Header(
        target=config.target,
        model_id=config.predictor.model_id,
        score_kind=config.score_kind,
        threshold=config.threshold,
        budget=config.budget,
        budget_used=budget_used,
        seed=config.seed,
        contrast=config.contrast.describe(),
        status=status,
        paths_enumerated=paths_enumerated,
        paths_untested=list(paths_untested),
        flagged_mediators=flagged_mediators(entries),
        weak_edges=list(weak_edges),
        skipped_subgroups=list(skipped_subgroups),
    )
    return LeakageReport(header=header, entries=entries, baselines=baselines or {}, overall=overall_verdict(entries))


def _render_text(report: LeakageReport) -> str:
    h = report.header
    lines = [
        f"target: {h.target}  model: {h.model_id}  score: {h.score_kind}  τ={h.threshold:g}",
        f"budget: {h.budget_used}/{h.budget} queries  seed: {h.seed}  contrast: {h.contrast}",
        f"propagation: {h.propagation}  averaging: {h.averaging}",
        f"status: {h.status}  overall: {report.overall.upper()}",
        f"paths: {h.paths_enumerated} enumerated, {h.paths_enumerated - len(h.paths_untested)} tested",
        "",
    ]
    if not report.entries:
        lines.append("no paths")
    else:
        lines.append(f"  {'verdict':<22}{'effect':>9}  {'ci95':<21}{'signed':>9}{'pairs':>7}{'queries':>9}  path")
        for e in report.entries:
            verdict = f"{GLYPHS[e.verdict]} {e.verdict}"
            ci = f"[{e.ci[0]:.4f}, {e.ci[1]:.4f}]"
            path = e.path if e.subgroup is None else f"{e.path} [{e.subgroup}]"
            lines.append(f"  {verdict:<22}{e.effect:>9.4f}  {ci:<21}{e.signed_mean:>9.4f}{e.n_pairs:>7}{e.queries:>9}  {path}")
    notes = [
        f"{label}: {', '.join(names)}"
        for label, names in (
            ("flagged mediators", h.flagged_mediators),
            ("untested paths", h.paths_untested),
            ("weakly supported edges", h.weak_edges),
            ("skipped subgroups", h.skipped_subgroups),
        )
        if names
    ]
    if notes:
        lines += [""] + notes
    if report.baselines:
        lines += ["", "baselines:"]
        for name, value in report.baselines.items():
            lines.append(f"  {name}: {json.dumps(value, sort_keys=True)}")
    return "\n".join(lines) + "\n"


def render(report: LeakageReport, format: str = "json") -> str:
    if format == "json":
        return report.json(indent=2) + "\n"
    if format == "text":
        return _render_text(report)
    raise ReportError(f"unknown report format {format!r}")


def parse_report(text: str) -> LeakageReport:
    try:
        return LeakageReport.parse_raw(text)
    except ValidationError as e:
        raise ReportError(f"invalid report: {e.errors()[0]['msg']}") from e


def load_report(path) -> LeakageReport:
    return parse_report(read_text(path, ReportError))


class Delta(BaseModel):
    path: str
    subgroup: Optional[str] = None
    old: float
    new: float
    change: float
    pooled_se: float


class ReportDiff(BaseModel):
    new_leaks: List[str] = Field(default_factory=list)
    resolved_leaks: List[str] = Field(default_factory=list)
    regressions: List[Delta] = Field(default_factory=list)
    deltas: List[Delta] = Field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not (self.new_leaks or self.resolved_leaks or self.regressions or self.deltas)

    @property
    def failing(self) -> bool:
        return bool(self.new_leaks or self.regressions)

    def render(self) -> str:
        if self.empty:
            return "no differences\n"
        lines = []
        for title, names in (("new leaks", self.new_leaks), ("resolved leaks", self.resolved_leaks)):
            if names:
                lines.append(f"{title}:")
                lines.extend(f"  {name}" for name in names)
        if self.regressions:
            lines.append("regressions:")
            lines.extend(f"  {d.path}: {d.old:.4f} -> {d.new:.4f} (2·se={2 * d.pooled_se:.4f})" for d in self.regressions)
        if self.deltas:
            lines.append("deltas:")
            lines.extend(f"  {d.path}: {d.change:+.4f}" for d in self.deltas)
        return "\n".join(lines) + "\n"


def _key(entry: Entry) -> str:
    return entry.path if entry.subgroup is None else f"{entry.path} [{entry.subgroup}]"


def diff(old: LeakageReport, new: LeakageReport) -> ReportDiff:
    if old.header.target != new.header.target:
        raise ReportError(f"target mismatch: {old.header.target!r} vs {new.header.target!r}")
    if old.header.threshold != new.header.threshold:
        raise ReportError(f"threshold mismatch: {old.header.threshold:g} vs {new.header.threshold:g}")

    before = {_key(e): e for e in old.entries}
    after = {_key(e): e for e in new.entries}
    result = ReportDiff()
    for key, entry in after.items():
        previous = before.get(key)
        if entry.verdict == "leak" and (previous is None or previous.verdict != "leak"):
            result.new_leaks.append(key)
        if previous is None:
            continue
        change = entry.effect - previous.effect
        if change == 0:
            continue
        pooled = math.sqrt(previous.std_error ** 2 + entry.std_error ** 2)
        delta = Delta(path=entry.path, subgroup=entry.subgroup, old=previous.effect, new=entry.effect, change=change, pooled_se=pooled)
        result.deltas.append(delta)
        if change > 2 * pooled:
            result.regressions.append(delta)
    for key, entry in before.items():
        if entry.verdict == "leak" and (key not in after or after[key].verdict != "leak"):
            result.resolved_leaks.append(key)
    return result
