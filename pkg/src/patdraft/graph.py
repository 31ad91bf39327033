"""Typed concept-graph and plan data model shared by every pipeline stage.

Graphs are immutable. Node and edge tuples are stored in a canonical order
(nodes by id, edges by endpoints then relation precedence) so two graphs
holding the same elements compare equal and serialize to the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence


class Category(str, Enum):
    """Drafting categories, in reasoning-chain order."""

    FIELD = "Field"
    TECH_PROBLEM = "TechProblem"
    PRIOR_ART = "PriorArt"
    NOVELTY = "Novelty"
    SOLUTION = "Solution"
    IMPLEMENTATION = "Implementation"
    EFFECTS = "Effects"
    EMBODIMENT = "Embodiment"
    FIGURE = "Figure"

    @classmethod
    def parse(cls, value: str) -> "Category":
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown category {value!r}") from None

    @property
    def position(self) -> int:
        """1-based position in the reasoning chain."""
        return CATEGORY_ORDER.index(self) + 1


CATEGORY_ORDER: tuple[Category, ...] = tuple(Category)


class RelationType(str, Enum):
    """Edge relations. Declaration order is the tie-break precedence."""

    SOLVES = "solves"
    IMPLEMENTS = "implements"
    CAUSES = "causes"
    IMPROVES = "improves"
    VALIDATES = "validates"

    @classmethod
    def parse(cls, value: str) -> "RelationType":
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown relation {value!r}") from None

    @property
    def rank(self) -> int:
        """0 for the highest-precedence relation (solves)."""
        return RELATION_PRECEDENCE.index(self)


RELATION_PRECEDENCE: tuple[RelationType, ...] = tuple(RelationType)
DEPENDENCY_RELATIONS = frozenset(
    {RelationType.SOLVES, RelationType.IMPLEMENTS, RelationType.CAUSES, RelationType.IMPROVES}
)


class SectionId(str, Enum):
    """Canonical patent-description sections in display order."""

    FIELD = "Field"
    BACKGROUND = "Background"
    SUMMARY = "Summary"
    DETAILED_DESCRIPTION = "DetailedDescription"
    EFFECTS = "Effects"

    @classmethod
    def parse(cls, value: str) -> "SectionId":
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown section {value!r}") from None


SECTION_ORDER: tuple[SectionId, ...] = tuple(SectionId)

_PUNCT = re.compile(r"[^\w\s]+", re.UNICODE)


def label_tokens(text: str) -> list[str]:
    """Lowercase, replace punctuation with spaces, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


def normalize_label(label: str) -> str:
    return " ".join(label_tokens(label))


def make_node_id(category: Category, label: str) -> str:
    """Content-derived node id: stable across runs and processes."""
    digest = hashlib.sha256(f"{category.value}\x1f{normalize_label(label)}".encode("utf-8"))
    return f"{category.value.lower()}-{digest.hexdigest()[:12]}"


@dataclass(frozen=True)
class ConceptNode:
    id: str
    category: Category
    label: str
    detail: str = ""
    placeholder: bool = False
    # which candidate graphs contributed the node; empty for injected placeholders
    provenance: frozenset[int] = field(default=frozenset(), compare=False)

    @classmethod
    def create(
        cls,
        category: Category,
        label: str,
        detail: str = "",
        *,
        placeholder: bool = False,
        provenance: Iterable[int] = (),
    ) -> "ConceptNode":
        return cls(
            id=make_node_id(category, label),
            category=category,
            label=label,
            detail=detail,
            placeholder=placeholder,
            provenance=frozenset(provenance),
        )

    @property
    def injected(self) -> bool:
        return self.placeholder and not self.provenance


@dataclass(frozen=True)
class ConceptEdge:
    src: str
    dst: str
    relation: RelationType
    # vote metadata is not part of edge identity
    votes: int = field(default=1, compare=False)
    synthetic: bool = field(default=False, compare=False)

    @property
    def pair(self) -> tuple[str, str]:
        return (self.src, self.dst)


def _edge_key(edge: ConceptEdge) -> tuple[str, str, int]:
    return (edge.src, edge.dst, edge.relation.rank)


@dataclass(frozen=True)
class ConceptGraph:
    """Directed typed graph. Construction never validates; see validate_graph."""

    nodes: tuple[ConceptNode, ...] = ()
    edges: tuple[ConceptEdge, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(sorted(self.nodes, key=lambda n: n.id)))
        object.__setattr__(self, "edges", tuple(sorted(self.edges, key=_edge_key)))

    @property
    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def node(self, node_id: str) -> ConceptNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def node_map(self) -> dict[str, ConceptNode]:
        return {n.id: n for n in self.nodes}

    def nodes_of(self, category: Category) -> list[ConceptNode]:
        return [n for n in self.nodes if n.category == category]

    def categories(self) -> set[Category]:
        return {n.category for n in self.nodes}

    def degree(self, node_id: str) -> int:
        return sum((e.src == node_id) + (e.dst == node_id) for e in self.edges)

    def __len__(self) -> int:
        return len(self.nodes)


def validate_graph(graph: ConceptGraph) -> list[str]:
    """Return one description per broken invariant; empty when the graph is valid."""
    problems: list[str] = []
    seen: set[str] = set()
    for node in graph.nodes:
        if node.id in seen:
            problems.append(f"duplicate node id {node.id}")
        seen.add(node.id)
        if not node.label.strip() and not node.placeholder:
            problems.append(f"empty label on node {node.id}")
    pairs: set[tuple[str, str]] = set()
    for edge in graph.edges:
        if edge.src not in seen:
            problems.append(f"edge src {edge.src} unresolved")
        if edge.dst not in seen:
            problems.append(f"edge dst {edge.dst} unresolved")
        if edge.src == edge.dst:
            problems.append(f"self-loop at {edge.src}")
        if edge.pair in pairs:
            problems.append(f"duplicate edge {edge.src}->{edge.dst}")
        pairs.add(edge.pair)
    return problems


def induced_subgraph(graph: ConceptGraph, node_ids: Iterable[str]) -> ConceptGraph:
    wanted = set(node_ids)
    known = set(graph.node_ids)
    unknown = sorted(wanted - known)
    if unknown:
        raise KeyError(f"unknown node id {unknown[0]}")
    return ConceptGraph(
        nodes=tuple(n for n in graph.nodes if n.id in wanted),
        edges=tuple(e for e in graph.edges if e.src in wanted and e.dst in wanted),
    )


def _one_line(text: str) -> str:
    return " ".join(text.split())


def node_sort_key(node: ConceptNode) -> tuple[int, str, str]:
    return (CATEGORY_ORDER.index(node.category), node.label, node.detail)


def linearize(subgraph: ConceptGraph) -> str:
    """Serialize a subgraph to prompt text.

    Node lines ``[Category] label: detail`` come first, sorted by category
    then label; edge lines ``src —relation→ dst`` follow in the same node
    order. Output never depends on node ids or insertion order.
    """
    ordered = sorted(subgraph.nodes, key=node_sort_key)
    rank = {n.id: i for i, n in enumerate(ordered)}
    labels = {n.id: n.label for n in ordered}
    lines = []
    for n in ordered:
        line = f"[{n.category.value}] {_one_line(n.label)}"
        if n.detail.strip():
            line += f": {_one_line(n.detail)}"
        lines.append(line)
    edges = sorted(subgraph.edges, key=lambda e: (rank[e.src], rank[e.dst], e.relation.rank))
    for e in edges:
        lines.append(f"{_one_line(labels[e.src])} —{e.relation.value}→ {_one_line(labels[e.dst])}")
    return "\n".join(lines)


# -- plans ------------------------------------------------------------------


@dataclass(frozen=True)
class SectionAssignment:
    section: SectionId
    node_ids: tuple[str, ...] = ()

    @property
    def is_empty(self) -> bool:
        return not self.node_ids


@dataclass(frozen=True)
class GateReport:
    per_section_connectivity: tuple[float, ...]
    connectivity: float
    per_section_consistency: tuple[float, ...]
    consistency: float
    passed: bool
    combined: float
    violations: tuple[str, ...] = ()

    def to_json(self) -> dict[str, Any]:
        return {
            "per_section_connectivity": list(self.per_section_connectivity),
            "connectivity": self.connectivity,
            "per_section_consistency": list(self.per_section_consistency),
            "consistency": self.consistency,
            "passed": self.passed,
            "combined": self.combined,
            "violations": list(self.violations),
        }


@dataclass(frozen=True)
class Plan:
    assignments: tuple[SectionAssignment, ...]
    order: tuple[int, ...]
    scores: GateReport | None = field(default=None, compare=False)

    def ordered(self) -> list[SectionAssignment]:
        return [self.assignments[i] for i in self.order]

    def position_of(self, index: int) -> int:
        return self.order.index(index)

    def section(self, section: SectionId) -> SectionAssignment | None:
        for a in self.assignments:
            if a.section == section:
                return a
        return None

    def with_scores(self, scores: GateReport) -> "Plan":
        return replace(self, scores=scores)


def validate_plan(plan: Plan, graph: ConceptGraph) -> list[str]:
    """Partition and permutation checks for a plan over ``graph``."""
    problems: list[str] = []
    if sorted(plan.order) != list(range(len(plan.assignments))):
        problems.append(f"order {list(plan.order)} is not a permutation of {len(plan.assignments)} sections")
    known = set(graph.node_ids)
    counts: dict[str, int] = {}
    for a in plan.assignments:
        for nid in a.node_ids:
            counts[nid] = counts.get(nid, 0) + 1
    for nid, count in counts.items():
        if nid not in known:
            problems.append(f"unknown node id {nid}")
        elif count > 1:
            problems.append(f"node {nid} assigned {count} times")
    for nid in graph.node_ids:
        if nid not in counts:
            problems.append(f"node {nid} unassigned")
    return problems


# -- JSON interchange ---------------------------------------------------------


def graph_to_json(graph: ConceptGraph) -> dict[str, Any]:
    return {
        "nodes": [
            {
                "id": n.id,
                "category": n.category.value,
                "label": n.label,
                "detail": n.detail,
                "placeholder": n.placeholder,
            }
            for n in graph.nodes
        ],
        "edges": [[e.src, e.dst, e.relation.value] for e in graph.edges],
    }


def graph_from_json(data: Mapping[str, Any]) -> ConceptGraph:
    """Strict reader for the interchange format; raises ValueError on malformed input."""
    try:
        nodes = tuple(
            ConceptNode(
                id=str(n["id"]),
                category=Category.parse(n["category"]),
                label=str(n["label"]),
                detail=str(n.get("detail", "")),
                placeholder=bool(n.get("placeholder", False)),
            )
            for n in data["nodes"]
        )
        edges = tuple(
            ConceptEdge(str(src), str(dst), RelationType.parse(rel)) for src, dst, rel in data["edges"]
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed graph JSON: {exc!r}") from exc
    return ConceptGraph(nodes, edges)


def plan_to_json(plan: Plan) -> dict[str, Any]:
    return {
        "sections": [{"section": a.section.value, "node_ids": list(a.node_ids)} for a in plan.assignments],
        "order": list(plan.order),
    }


def plan_from_json(data: Mapping[str, Any]) -> Plan:
    try:
        assignments = tuple(
            SectionAssignment(SectionId.parse(s["section"]), tuple(str(x) for x in s["node_ids"]))
            for s in data["sections"]
        )
        order = tuple(int(i) for i in data.get("order", range(len(assignments))))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed plan JSON: {exc!r}") from exc
    return Plan(assignments, order)


def dumps(payload: Any) -> str:
    """Canonical JSON text used for every artifact file."""
    return json.dumps(payload, indent=2, ensure_ascii=False, sort_keys=False) + "\n"


def sorted_nodes(nodes: Sequence[ConceptNode]) -> list[ConceptNode]:
    return sorted(nodes, key=node_sort_key)
