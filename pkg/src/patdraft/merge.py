"""Fusing the three candidate graphs into one refined graph.

The pipeline is dedup_nodes -> vote_edges -> prune -> verify_mandatory.
Every step is a pure function of its inputs; candidates keep their index
(1-based) throughout so results never depend on dict or set iteration order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

from .gateway import Gateway
from .graph import (
    DEPENDENCY_RELATIONS,
    RELATION_PRECEDENCE,
    Category,
    ConceptEdge,
    ConceptGraph,
    ConceptNode,
    RelationType,
    graph_to_json,
    label_tokens,
    make_node_id,
    validate_graph,
)
from .induction import EDGE_TEMPLATES, GraphParseError, parse_graph_json

log = logging.getLogger(__name__)

MANDATORY_CATEGORIES: tuple[Category, ...] = (Category.FIELD, Category.TECH_PROBLEM, Category.SOLUTION)

Similarity = Callable[[str, str], float]


def jaccard(a: str, b: str) -> float:
    """Token-set Jaccard similarity of two labels (lowercased, punctuation stripped)."""
    ta, tb = set(label_tokens(a)), set(label_tokens(b))
    if not ta and not tb:
        return 1.0
    return len(ta & tb) / len(ta | tb)


@dataclass(frozen=True)
class MergeConfig:
    dedup_similarity_threshold: float = 0.8
    relation_precedence: tuple[RelationType, ...] = RELATION_PRECEDENCE
    mandatory_categories: tuple[Category, ...] = MANDATORY_CATEGORIES
    similarity: Similarity = field(default=jaccard, compare=False)
    backend: str = "algorithmic"

    def __post_init__(self) -> None:
        if not 0.0 <= self.dedup_similarity_threshold <= 1.0:
            raise ValueError(f"dedup_similarity_threshold {self.dedup_similarity_threshold} outside [0, 1]")
        if self.backend not in ("algorithmic", "model"):
            raise ValueError(f"unknown merge backend {self.backend!r}")

    def rank(self, relation: RelationType) -> int:
        return self.relation_precedence.index(relation)


class MergeError(ValueError):
    pass


@dataclass(frozen=True)
class Member:
    candidate: int
    node: ConceptNode


@dataclass(frozen=True)
class NodeCluster:
    representative: ConceptNode
    members: tuple[Member, ...]

    @property
    def provenance(self) -> frozenset[int]:
        out: set[int] = set()
        for m in self.members:
            out |= m.node.provenance or {m.candidate}
        return frozenset(out)

    def merged_node(self) -> ConceptNode:
        rep = self.representative
        return replace(rep, id=make_node_id(rep.category, rep.label), provenance=self.provenance)


@dataclass
class MergeReport:
    clusters: list[dict[str, Any]] = field(default_factory=list)
    votes: list[dict[str, Any]] = field(default_factory=list)
    dropped_edges: list[dict[str, Any]] = field(default_factory=list)
    pruned_edges: list[dict[str, Any]] = field(default_factory=list)
    pruned_nodes: list[dict[str, Any]] = field(default_factory=list)
    injected: list[dict[str, Any]] = field(default_factory=list)
    synthetic_edges: list[dict[str, Any]] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "clusters": self.clusters,
            "votes": self.votes,
            "dropped_edges": self.dropped_edges,
            "pruned_edges": self.pruned_edges,
            "pruned_nodes": self.pruned_nodes,
            "injected": self.injected,
            "synthetic_edges": self.synthetic_edges,
        }


def dedup_nodes(candidates: Sequence[ConceptGraph], config: MergeConfig | None = None) -> list[NodeCluster]:
    """Cluster same-category nodes whose label similarity reaches the threshold.

    Clusters are the transitive closure of pairwise links. The representative
    is the member from the lowest candidate index (then lowest node id).
    """
    config = config or MergeConfig()
    members = [Member(i, n) for i, g in enumerate(candidates, start=1) for n in g.nodes]
    parent = list(range(len(members)))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i in range(len(members)):
        for j in range(i + 1, len(members)):
            a, b = members[i].node, members[j].node
            if a.category != b.category:
                continue
            if config.similarity(a.label, b.label) >= config.dedup_similarity_threshold:
                parent[find(j)] = find(i)

    groups: dict[int, list[Member]] = {}
    for idx, m in enumerate(members):
        groups.setdefault(find(idx), []).append(m)
    clusters = []
    for group in groups.values():
        group.sort(key=lambda m: (m.candidate, m.node.id))
        clusters.append(NodeCluster(group[0].node, tuple(group)))
    clusters.sort(key=lambda c: (c.members[0].candidate, c.representative.id))
    return clusters


def _cluster_index(clusters: Sequence[NodeCluster]) -> dict[tuple[int, str], str]:
    index: dict[tuple[int, str], str] = {}
    for c in clusters:
        rep_id = c.merged_node().id
        for m in c.members:
            index[(m.candidate, m.node.id)] = rep_id
    return index


def vote_edges(
    candidates: Sequence[ConceptGraph],
    clusters: Sequence[NodeCluster],
    config: MergeConfig | None = None,
    report: MergeReport | None = None,
) -> list[ConceptEdge]:
    """Lift edges onto cluster representatives and keep one relation per ordered pair.

    The relation backed by the most candidates wins; ties go to the
    higher-precedence relation. Each candidate counts at most once per
    (pair, relation).
    """
    config = config or MergeConfig()
    index = _cluster_index(clusters)
    support: dict[tuple[str, str], dict[RelationType, set[int]]] = {}
    for cand, graph in enumerate(candidates, start=1):
        for e in graph.edges:
            src, dst = index.get((cand, e.src)), index.get((cand, e.dst))
            if src is None or dst is None:
                if report is not None:
                    report.dropped_edges.append(
                        {"candidate": cand, "edge": [e.src, e.dst, e.relation.value], "reason": "dangling"}
                    )
                continue
            if src == dst:
                if report is not None:
                    report.dropped_edges.append(
                        {"candidate": cand, "edge": [e.src, e.dst, e.relation.value], "reason": "self-loop after dedup"}
                    )
                continue
            support.setdefault((src, dst), {}).setdefault(e.relation, set()).add(cand)

    resolved = []
    for (src, dst), by_rel in sorted(support.items()):
        ranked = sorted(by_rel.items(), key=lambda kv: (-len(kv[1]), config.rank(kv[0])))
        winner, voters = ranked[0]
        resolved.append(ConceptEdge(src, dst, winner, votes=len(voters)))
        if report is not None:
            report.votes.append(
                {
                    "src": src,
                    "dst": dst,
                    "relation": winner.value,
                    "votes": len(voters),
                    "candidates": sorted(voters),
                    "rejected": {rel.value: sorted(c) for rel, c in ranked[1:]},
                }
            )
    return resolved


def _find_cycle(edges: Sequence[ConceptEdge]) -> list[ConceptEdge] | None:
    """Return the edges of one directed cycle, found by ordered DFS, or None."""
    adj: dict[str, list[ConceptEdge]] = {}
    for e in sorted(edges, key=lambda e: (e.src, e.dst)):
        adj.setdefault(e.src, []).append(e)
    done: set[str] = set()
    path: list[str] = []
    path_edges: list[ConceptEdge] = []

    def visit(node: str) -> list[ConceptEdge] | None:
        path.append(node)
        for e in adj.get(node, []):
            if e.dst in path:
                return path_edges[path.index(e.dst):] + [e]
            if e.dst not in done:
                path_edges.append(e)
                found = visit(e.dst)
                if found:
                    return found
                path_edges.pop()
        path.pop()
        done.add(node)
        return None

    for root in sorted(adj):
        if root not in done:
            found = visit(root)
            if found:
                return found
    return None


def prune(
    graph: ConceptGraph, config: MergeConfig | None = None, report: MergeReport | None = None
) -> ConceptGraph:
    """Break dependency cycles, then drop isolated non-mandatory nodes.

    ``validates`` edges are exempt from cycle breaking. For each cycle found,
    the member edge with fewest votes goes; ties remove the lowest-precedence
    relation, then the lexicographically smallest (src, dst).
    """
    config = config or MergeConfig()
    edges = list(graph.edges)
    while True:
        cycle = _find_cycle([e for e in edges if e.relation in DEPENDENCY_RELATIONS])
        if cycle is None:
            break
        victim = min(cycle, key=lambda e: (e.votes, -config.rank(e.relation), e.src, e.dst))
        edges.remove(victim)
        if report is not None:
            report.pruned_edges.append(
                {
                    "edge": [victim.src, victim.dst, victim.relation.value],
                    "votes": victim.votes,
                    "reason": "dependency cycle",
                    "cycle": [[e.src, e.dst, e.relation.value] for e in cycle],
                }
            )
    touched = {e.src for e in edges} | {e.dst for e in edges}
    nodes = []
    for n in graph.nodes:
        if n.id in touched or n.category in config.mandatory_categories:
            nodes.append(n)
        elif report is not None:
            report.pruned_nodes.append({"id": n.id, "label": n.label, "reason": "isolated"})
    return ConceptGraph(tuple(nodes), tuple(edges))


def placeholder_node(category: Category) -> ConceptNode:
    return ConceptNode.create(category, f"unspecified-{category.value}", placeholder=True)


def verify_mandatory(
    graph: ConceptGraph, config: MergeConfig | None = None, report: MergeReport | None = None
) -> ConceptGraph:
    """Inject placeholders for missing mandatory categories.

    Template edges between mandatory categories are added (votes=0,
    synthetic) only where at least one endpoint is a fresh placeholder.
    """
    config = config or MergeConfig()
    present = graph.categories()
    injected = {c: placeholder_node(c) for c in config.mandatory_categories if c not in present}
    if not injected:
        return graph
    nodes = list(graph.nodes) + list(injected.values())
    edges = list(graph.edges)
    pairs = {e.pair for e in edges}
    for node in injected.values():
        if report is not None:
            report.injected.append({"id": node.id, "category": node.category.value, "label": node.label})
    mandatory = set(config.mandatory_categories)
    for src_cat, rel, dst_cat in EDGE_TEMPLATES:
        if src_cat not in mandatory or dst_cat not in mandatory:
            continue
        if src_cat not in injected and dst_cat not in injected:
            continue
        src = injected.get(src_cat) or _first_of(graph, src_cat)
        dst = injected.get(dst_cat) or _first_of(graph, dst_cat)
        if src is None or dst is None or (src.id, dst.id) in pairs:
            continue
        edge = ConceptEdge(src.id, dst.id, rel, votes=0, synthetic=True)
        edges.append(edge)
        pairs.add(edge.pair)
        if report is not None:
            report.synthetic_edges.append({"edge": [src.id, dst.id, rel.value], "votes": 0})
    return ConceptGraph(tuple(nodes), tuple(edges))


def _first_of(graph: ConceptGraph, category: Category) -> ConceptNode | None:
    found = graph.nodes_of(category)
    return found[0] if found else None


def merge_with_report(
    candidates: Sequence[ConceptGraph], config: MergeConfig | None = None
) -> tuple[ConceptGraph, MergeReport]:
    if len(candidates) != 3:
        raise MergeError(f"merge needs exactly 3 candidate graphs, got {len(candidates)}")
    config = config or MergeConfig()
    report = MergeReport()
    clusters = dedup_nodes(candidates, config)
    for c in clusters:
        node = c.merged_node()
        report.clusters.append(
            {
                "id": node.id,
                "category": node.category.value,
                "label": node.label,
                "provenance": sorted(c.provenance),
                "members": [
                    {"candidate": m.candidate, "id": m.node.id, "label": m.node.label} for m in c.members
                ],
            }
        )
    edges = vote_edges(candidates, clusters, config, report)
    voted = ConceptGraph(tuple(c.merged_node() for c in clusters), tuple(edges))
    merged = verify_mandatory(prune(voted, config, report), config, report)
    problems = validate_graph(merged)
    if problems:  # pragma: no cover - guarded by construction
        raise MergeError(f"merge produced an invalid graph: {problems}")
    return merged, report


def merge_graphs(candidates: Sequence[ConceptGraph], config: MergeConfig | None = None) -> ConceptGraph:
    """Fuse exactly three candidates (any may be empty) into the refined graph."""
    return merge_with_report(candidates, config)[0]


MERGE_INSTRUCTION = """[Instruction]
You are given three candidate graphs generated from the same document.
Each graph is represented in JSON with two fields: "nodes" and "edges".
Your task is to merge these graphs into a single, consistent graph.

[Constraints]
- Do not invent any new nodes or edges not present in the inputs.
- Preserve all node labels exactly as given.
- If an edge type conflicts, prefer the one that appears more than once.
- Include all unique nodes.

[Output Format]
Return the merged graph in JSON:
{
  "nodes": [...],
  "edges": [...]
}"""


def merge_with_model(
    candidates: Sequence[ConceptGraph], gateway: Gateway, config: MergeConfig | None = None
) -> tuple[ConceptGraph, MergeReport]:
    """Ask the model to merge, then enforce the same structural guarantees.

    Falls back to the algorithmic merge when the reply cannot be parsed.
    """
    if len(candidates) != 3:
        raise MergeError(f"merge needs exactly 3 candidate graphs, got {len(candidates)}")
    config = config or MergeConfig()
    shown = "\n".join(
        f"Graph {i}:\n{json.dumps(graph_to_json(g), ensure_ascii=False)}" for i, g in enumerate(candidates, start=1)
    )
    reply = gateway.complete(gateway.request("merge", MERGE_INSTRUCTION, f"[Input]\n{shown}")).text
    try:
        graph = parse_graph_json(reply)
    except GraphParseError as exc:
        log.warning("model merge reply unparseable (%s); using algorithmic merge", exc)
        return merge_with_report(candidates, config)
    report = MergeReport()
    merged = verify_mandatory(prune(graph, config, report), config, report)
    return merged, report
