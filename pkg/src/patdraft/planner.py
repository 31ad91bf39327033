"""Candidate section plans, gate scoring, and plan selection."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from .gateway import Gateway
from .graph import (
    CATEGORY_ORDER,
    SECTION_ORDER,
    Category,
    ConceptGraph,
    GateReport,
    Plan,
    SectionAssignment,
    SectionId,
    node_sort_key,
    validate_plan,
)
from .induction import GraphParseError

log = logging.getLogger(__name__)

H_MAX = math.log(len(CATEGORY_ORDER))

DEFAULT_SECTION_MAP: dict[Category, SectionId] = {
    Category.FIELD: SectionId.FIELD,
    Category.TECH_PROBLEM: SectionId.BACKGROUND,
    Category.PRIOR_ART: SectionId.BACKGROUND,
    Category.NOVELTY: SectionId.SUMMARY,
    Category.SOLUTION: SectionId.DETAILED_DESCRIPTION,
    Category.IMPLEMENTATION: SectionId.DETAILED_DESCRIPTION,
    Category.EMBODIMENT: SectionId.DETAILED_DESCRIPTION,
    Category.FIGURE: SectionId.DETAILED_DESCRIPTION,
    Category.EFFECTS: SectionId.EFFECTS,
}

# First occurrences must follow this sequence across the ordered sections.
NARRATIVE_FLOW = (Category.TECH_PROBLEM, Category.SOLUTION, Category.IMPLEMENTATION, Category.EFFECTS)


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class PlannerConfig:
    k: int = 5
    tau_c: float = 0.5
    tau_s: float = 0.6
    category_section_map: Mapping[Category, SectionId] = field(
        default_factory=lambda: dict(DEFAULT_SECTION_MAP)
    )

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        for name in ("tau_c", "tau_s"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} {value} outside [0, 1]")
        missing = set(CATEGORY_ORDER) - set(self.category_section_map)
        if missing:
            raise ValueError(f"category_section_map lacks {sorted(c.value for c in missing)}")


def default_assignment(graph: ConceptGraph, config: PlannerConfig | None = None) -> Plan:
    """Fallback plan: map each category to its conventional section, canonical order."""
    config = config or PlannerConfig()
    buckets: dict[SectionId, list] = {s: [] for s in SECTION_ORDER}
    for node in sorted(graph.nodes, key=lambda n: (node_sort_key(n), n.id)):
        buckets[config.category_section_map[node.category]].append(node.id)
    assignments = tuple(SectionAssignment(s, tuple(buckets[s])) for s in SECTION_ORDER)
    return Plan(assignments, tuple(range(len(assignments))))


def _require_partition(plan: Plan, graph: ConceptGraph) -> None:
    problems = validate_plan(plan, graph)
    if problems:
        raise PlanError(f"plan does not partition the graph: {problems[0]}")


def connectivity(plan: Plan, graph: ConceptGraph) -> tuple[list[float], float]:
    """Per-section internal link density and its mean over all sections.

    C_i = internal edges / max(1, n_i (n_i - 1)); empty sections score 0.
    """
    _require_partition(plan, graph)
    per_section = []
    for a in plan.assignments:
        members = set(a.node_ids)
        internal = sum(1 for e in graph.edges if e.src in members and e.dst in members)
        n = len(members)
        per_section.append(internal / max(1, n * (n - 1)))
    return per_section, (sum(per_section) / len(per_section) if per_section else 0.0)


def section_entropy(categories: Sequence[Category]) -> float:
    if not categories:
        return 0.0
    total = len(categories)
    counts: dict[Category, int] = {}
    for c in categories:
        counts[c] = counts.get(c, 0) + 1
    return -sum((k / total) * math.log(k / total) for k in counts.values())


def semantic_consistency(plan: Plan, graph: ConceptGraph) -> tuple[list[float], float]:
    """Per-section type homogeneity 1 - H/ln 9 and its mean; empty sections score 1."""
    _require_partition(plan, graph)
    nodes = graph.node_map()
    per_section = []
    for a in plan.assignments:
        h = section_entropy([nodes[i].category for i in a.node_ids])
        per_section.append(min(1.0, max(0.0, 1.0 - h / H_MAX)))
    return per_section, (sum(per_section) / len(per_section) if per_section else 0.0)


def ordering_violations(plan: Plan, graph: ConceptGraph) -> list[str]:
    """Check drafting conventions on section order and figure placement.

    Reports embodiment sections ordered before problem sections, figures
    separated from every implementation (only when the graph has one), and
    breaks of the problem -> solution -> implementation -> effects flow.
    """
    nodes = graph.node_map()
    ordered = plan.ordered()
    cats = [{nodes[i].category for i in a.node_ids if i in nodes} for a in ordered]
    violations: list[str] = []

    problem_pos = [p for p, c in enumerate(cats) if Category.TECH_PROBLEM in c]
    embodiment_pos = [p for p, c in enumerate(cats) if Category.EMBODIMENT in c]
    if problem_pos and embodiment_pos and min(embodiment_pos) < max(problem_pos):
        emb, prob = ordered[min(embodiment_pos)].section, ordered[max(problem_pos)].section
        violations.append(f"embodiment in {emb.value} placed before technical problem in {prob.value}")

    impl_ids = {n.id for n in graph.nodes_of(Category.IMPLEMENTATION)}
    if impl_ids:
        for a, c in zip(ordered, cats):
            if Category.FIGURE in c and Category.IMPLEMENTATION in c:
                continue
            for nid in a.node_ids:
                if nid not in nodes or nodes[nid].category != Category.FIGURE:
                    continue
                linked = any(
                    (e.src == nid and e.dst in impl_ids) or (e.dst == nid and e.src in impl_ids)
                    for e in graph.edges
                )
                if not linked:
                    violations.append(f"figure {nid} in {a.section.value} dissociated from implementation")

    first: list[tuple[Category, int]] = []
    for category in NARRATIVE_FLOW:
        positions = [p for p, c in enumerate(cats) if category in c]
        if positions:
            first.append((category, positions[0]))
    for (cat_a, pos_a), (cat_b, pos_b) in zip(first, first[1:]):
        if pos_b < pos_a:
            violations.append(f"narrative flow: {cat_b.value} appears before {cat_a.value}")
    return violations


def passes_gate(connectivity_score: float, consistency_score: float, config: PlannerConfig) -> bool:
    return connectivity_score >= config.tau_c and consistency_score >= config.tau_s


def score_plan(plan: Plan, graph: ConceptGraph, config: PlannerConfig | None = None) -> GateReport:
    config = config or PlannerConfig()
    per_c, c = connectivity(plan, graph)
    per_s, s = semantic_consistency(plan, graph)
    return GateReport(
        per_section_connectivity=tuple(per_c),
        connectivity=c,
        per_section_consistency=tuple(per_s),
        consistency=s,
        passed=passes_gate(c, s, config),
        combined=0.5 * c + 0.5 * s,
        violations=tuple(ordering_violations(plan, graph)),
    )


@dataclass(frozen=True)
class GateResult:
    plan: Plan
    selected_index: int | None  # None when the default plan replaced every candidate
    reports: tuple[GateReport, ...]
    policy: str  # "passed" | "fallback" | "default"

    def to_json(self) -> dict[str, Any]:
        return {
            "selected_index": self.selected_index,
            "policy": self.policy,
            "selected": self.plan.scores.to_json() if self.plan.scores else None,
            "candidates": [dict(index=i, **r.to_json()) for i, r in enumerate(self.reports)],
        }


def gate(plans: Sequence[Plan], graph: ConceptGraph, config: PlannerConfig | None = None) -> GateResult:
    """Select a plan: drop rule violators, prefer threshold passers, maximise the combined score.

    Ties go to the lowest candidate index. If every candidate violates an
    ordering rule, the default plan is returned instead.
    """
    if not plans:
        raise PlanError("gate needs at least one candidate plan")
    config = config or PlannerConfig()
    reports = tuple(score_plan(p, graph, config) for p in plans)
    clean = [i for i, r in enumerate(reports) if not r.violations]
    passers = [i for i in clean if reports[i].passed]

    def best(indices: list[int]) -> int:
        return max(indices, key=lambda i: (reports[i].combined, -i))

    if passers:
        idx, policy = best(passers), "passed"
    elif clean:
        idx, policy = best(clean), "fallback"
    else:
        log.warning("all %d candidate plans violate ordering rules; using the default plan", len(plans))
        fallback = default_assignment(graph, config)
        report = score_plan(fallback, graph, config)
        if report.violations:
            log.warning("default plan violates ordering rules: %s", "; ".join(report.violations))
        return GateResult(fallback.with_scores(report), None, reports, "default")
    return GateResult(plans[idx].with_scores(reports[idx]), idx, reports, policy)


# -- model-proposed plans -----------------------------------------------------

PLAN_FORMAT = """Return JSON of the form:
{"sections": [{"section": "Field", "node_ids": ["..."]}, ...], "order": ["Field", "Background", ...]}
Every node id must appear in exactly one section."""


def plan_prompt(graph: ConceptGraph, index: int, k: int) -> tuple[str, str]:
    sections = ", ".join(s.value for s in SECTION_ORDER)
    system = (
        "You are an expert patent drafter organising a concept graph into the sections of a patent description.\n"
        f"Sections: {sections}.\n"
        "Cluster related nodes so each section is internally connected and type-consistent. "
        "Keep the narrative flow problem, solution, implementation, effects; never put embodiments "
        "before the technical problem, and keep figures with the implementations they depict.\n"
        + PLAN_FORMAT
    )
    node_lines = "\n".join(
        f"- {n.id} [{n.category.value}] {n.label}" for n in sorted(graph.nodes, key=lambda n: (node_sort_key(n), n.id))
    )
    edge_lines = "\n".join(f"- {e.src} {e.relation.value} {e.dst}" for e in graph.edges)
    user = (
        f"Candidate plan {index} of {k}; propose an assignment distinct from the conventional one.\n\n"
        f"Nodes:\n{node_lines}\n\nEdges:\n{edge_lines or '- (none)'}"
    )
    return system, user


def _find_plan_object(text: str) -> dict[str, Any]:
    decoder = json.JSONDecoder()
    pos = text.find("{")
    while pos != -1:
        try:
            obj, _ = decoder.raw_decode(text, pos)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict) and "sections" in obj:
            return obj
        pos = text.find("{", pos + 1)
    raise GraphParseError("no JSON object with 'sections' found", len(text.encode("utf-8")))


def parse_plan_reply(text: str, graph: ConceptGraph) -> Plan:
    """Parse a model-proposed assignment; raise PlanError unless it partitions ``graph``.

    Sections the reply leaves out are appended as empty sections so every
    plan covers all five sections.
    """
    try:
        obj = _find_plan_object(text)
    except GraphParseError as exc:
        raise PlanError(str(exc)) from exc
    assignments: list[SectionAssignment] = []
    seen: set[SectionId] = set()
    for entry in obj.get("sections") or []:
        try:
            section = SectionId.parse(str(entry["section"]))
            ids = tuple(str(x) for x in entry.get("node_ids", []))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise PlanError(f"bad section entry {entry!r}: {exc}") from exc
        if section in seen:
            raise PlanError(f"section {section.value} listed twice")
        seen.add(section)
        assignments.append(SectionAssignment(section, ids))

    raw_order = obj.get("order")
    if raw_order is None:
        order = list(range(len(assignments)))
    else:
        names = [a.section for a in assignments]
        order = []
        for item in raw_order:
            if isinstance(item, int) and not isinstance(item, bool):
                order.append(item)
            else:
                try:
                    order.append(names.index(SectionId.parse(str(item))))
                except ValueError as exc:
                    raise PlanError(f"order names unknown section {item!r}") from exc
        if sorted(order) != list(range(len(assignments))):
            raise PlanError(f"order {raw_order!r} is not a permutation of the listed sections")
    for s in SECTION_ORDER:
        if s not in seen:
            order.append(len(assignments))
            assignments.append(SectionAssignment(s, ()))
    plan = Plan(tuple(assignments), tuple(order))
    _require_partition(plan, graph)
    return plan


def propose_plans(graph: ConceptGraph, gateway: Gateway, config: PlannerConfig | None = None) -> list[Plan]:
    """Exactly ``k`` plans: the default first, then model proposals (default on any bad reply)."""
    config = config or PlannerConfig()
    default = default_assignment(graph, config)
    plans = [default]
    for index in range(2, config.k + 1):
        system, user = plan_prompt(graph, index, config.k)
        reply = gateway.complete(gateway.request("plan", system, user)).text
        try:
            plans.append(parse_plan_reply(reply, graph))
        except PlanError as exc:
            log.warning("candidate plan %d rejected (%s); using the default plan", index, exc)
            plans.append(default)
    return plans
