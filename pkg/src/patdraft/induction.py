"""Expert-reasoning chain and the three candidate concept graphs."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

from .gateway import Gateway
from .graph import (
    CATEGORY_ORDER,
    Category,
    ConceptEdge,
    ConceptGraph,
    ConceptNode,
    RelationType,
    make_node_id,
)

log = logging.getLogger(__name__)

UNSPECIFIED = "unspecified"
DEFAULT_CHAR_BUDGET = 48_000
LABEL_MAX_CHARS = 120

C = Category
R = RelationType

# Rule-based candidate: (src category, relation, dst category).
EDGE_TEMPLATES: tuple[tuple[Category, RelationType, Category], ...] = (
    (C.TECH_PROBLEM, R.SOLVES, C.SOLUTION),
    (C.SOLUTION, R.IMPLEMENTS, C.IMPLEMENTATION),
    (C.IMPLEMENTATION, R.CAUSES, C.EFFECTS),
    (C.NOVELTY, R.IMPROVES, C.PRIOR_ART),
    (C.EFFECTS, R.VALIDATES, C.TECH_PROBLEM),
    (C.EMBODIMENT, R.IMPLEMENTS, C.SOLUTION),
    (C.FIGURE, R.IMPLEMENTS, C.IMPLEMENTATION),
    (C.PRIOR_ART, R.CAUSES, C.TECH_PROBLEM),
)

CATEGORY_PRIMERS: dict[Category, str] = {
    C.FIELD: "The present invention relates to",
    C.TECH_PROBLEM: "However, conventional technology has the following drawbacks",
    C.PRIOR_ART: "According to the prior art",
    C.NOVELTY: "The present invention differs from the prior art in that",
    C.SOLUTION: "To solve the above problems, the present invention provides",
    C.IMPLEMENTATION: "Specifically, the invention is implemented by",
    C.EFFECTS: "Therefore, according to the present invention, the effect is",
    C.EMBODIMENT: "According to one embodiment of the present invention",
    C.FIGURE: "As shown in Figure 1",
}

CATEGORY_TASKS: dict[Category, str] = {
    C.FIELD: "State the technical field of the invention in one or two sentences.",
    C.TECH_PROBLEM: (
        "Identify the technical problem the invention addresses. Explicitly contrast "
        "the proposed method with the limitations of the prior art."
    ),
    C.PRIOR_ART: "Summarize the existing approaches the document builds on or compares against.",
    C.NOVELTY: "State what is new relative to the prior art.",
    C.SOLUTION: "Describe the core technical solution to the stated problem.",
    C.IMPLEMENTATION: "Describe the concrete components, steps, or modules that implement the solution.",
    C.EFFECTS: "State the technical effects and measurable advantages of the invention.",
    C.EMBODIMENT: "Describe concrete embodiments and variants of the invention.",
    C.FIGURE: "Describe the figures or diagrams that would illustrate the invention.",
}

EXPLICIT_SUFFIX = (
    "\n\nYour previous answer was empty. Answer explicitly with at least one sentence; "
    f"if the document says nothing on this point, answer exactly '{UNSPECIFIED}'."
)

# Category names and common spellings seen in model output.
_CATEGORY_ALIASES: dict[str, Category] = {
    "problem": C.TECH_PROBLEM,
    "technicalproblem": C.TECH_PROBLEM,
    "techproblem": C.TECH_PROBLEM,
    "effect": C.EFFECTS,
    "effects": C.EFFECTS,
    "priorart": C.PRIOR_ART,
    "background": C.PRIOR_ART,
    "field": C.FIELD,
    "technicalfield": C.FIELD,
    "novelty": C.NOVELTY,
    "solution": C.SOLUTION,
    "implementation": C.IMPLEMENTATION,
    "embodiment": C.EMBODIMENT,
    "embodiments": C.EMBODIMENT,
    "figure": C.FIGURE,
    "figures": C.FIGURE,
}


def category_alias(text: str) -> Category | None:
    """Map a label such as ``"Problem"`` or ``"Prior Art"`` to its category."""
    key = re.sub(r"[^a-z]", "", text.lower())
    return _CATEGORY_ALIASES.get(key)


class InductionError(ValueError):
    pass


class GraphParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True)
class Document:
    raw_text: str
    sections: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if not self.raw_text.strip():
            raise InductionError("document text is empty")

    @classmethod
    def from_text(cls, text: str) -> "Document":
        sections: list[tuple[str, str]] = []
        heading: str | None = None
        body: list[str] = []
        for line in text.splitlines():
            if line.lstrip().startswith("#"):
                if heading is not None:
                    sections.append((heading, "\n".join(body).strip()))
                heading = line.lstrip().lstrip("#").strip()
                body = []
            else:
                body.append(line)
        if heading is not None:
            sections.append((heading, "\n".join(body).strip()))
        return cls(text, tuple(sections))

    @classmethod
    def load(cls, path: str | Path) -> "Document":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class ReasoningStep:
    category: Category
    position: int
    text: str
    context_hash: str

    @property
    def specified(self) -> bool:
        return self.text.strip() != UNSPECIFIED

    def to_json(self) -> dict[str, Any]:
        return {
            "category": self.category.value,
            "position": self.position,
            "text": self.text,
            "context_hash": self.context_hash,
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "ReasoningStep":
        return cls(Category.parse(data["category"]), int(data["position"]), data["text"], data["context_hash"])


def truncate_document(text: str, budget: int = DEFAULT_CHAR_BUDGET) -> tuple[str, bool]:
    """Keep roughly the first three quarters and last quarter of the budget."""
    if len(text) <= budget:
        return text, False
    marker = "\n[... truncated ...]\n"
    room = max(budget - len(marker), 0)
    head = (room * 3) // 4
    tail = room - head
    return text[:head] + marker + (text[-tail:] if tail else ""), True


def step_prompt(category: Category, document_text: str, prior: Sequence[ReasoningStep]) -> tuple[str, str]:
    primer = CATEGORY_PRIMERS[category]
    system = (
        f"{primer} ...\n\n"
        f"You are an experienced patent attorney analysing a scientific paper. "
        f"Reasoning step {category.position} of 9: {category.value}.\n"
        f"{CATEGORY_TASKS[category]}\n"
        f'Open your answer with the phrase "{primer}" and use standard patent phrasing. '
        "Keep the answer focused on this category only."
    )
    parts = [f"Document:\n{document_text}"]
    if prior:
        parts.append("Previous reasoning steps:")
        parts.extend(f"[{s.category.value}]\n{s.text}" for s in prior)
    parts.append(f"Now write the {category.value} step.")
    return system, "\n\n".join(parts)


def run_reasoning_chain(
    document: Document, gateway: Gateway, char_budget: int = DEFAULT_CHAR_BUDGET
) -> list[ReasoningStep]:
    """Issue one model call per category, each seeing the document and all earlier steps."""
    text, truncated = truncate_document(document.raw_text, char_budget)
    if truncated:
        log.warning("document truncated from %d to %d characters", len(document.raw_text), char_budget)
    steps: list[ReasoningStep] = []
    for category in CATEGORY_ORDER:
        system, user = step_prompt(category, text, steps)
        context_hash = hashlib.sha256(user.encode("utf-8")).hexdigest()
        reply = gateway.complete(gateway.request("induction", system, user)).text.strip()
        if not reply:
            reply = gateway.complete(gateway.request("induction", system, user + EXPLICIT_SUFFIX)).text.strip()
        if not reply:
            log.warning("reasoning step %s returned no text; recorded as %r", category.value, UNSPECIFIED)
            reply = UNSPECIFIED
        steps.append(ReasoningStep(category, category.position, reply, context_hash))
    return steps


def first_sentence(text: str, limit: int = LABEL_MAX_CHARS) -> str:
    flat = " ".join(text.split())
    sentence = re.split(r"(?<=[.!?])\s", flat, maxsplit=1)[0]
    return sentence[:limit].rstrip()


def _check_steps(steps: Sequence[ReasoningStep]) -> None:
    if len(steps) < len(CATEGORY_ORDER) or {s.category for s in steps} != set(CATEGORY_ORDER):
        raise InductionError(f"expected all 9 reasoning steps, got {len(steps)}")


def build_rule_based_graph(
    steps: Sequence[ReasoningStep],
    templates: Iterable[tuple[Category, RelationType, Category]] = EDGE_TEMPLATES,
) -> ConceptGraph:
    """Candidate 1: one node per specified step, edges from the template table."""
    _check_steps(steps)
    by_cat: dict[Category, ConceptNode] = {}
    for step in sorted(steps, key=lambda s: s.position):
        if not step.specified or step.category in by_cat:
            continue
        label = first_sentence(step.text) or step.category.value
        by_cat[step.category] = ConceptNode.create(step.category, label, step.text.strip(), provenance={1})
    edges = [
        ConceptEdge(by_cat[src].id, by_cat[dst].id, rel, votes=1)
        for src, rel, dst in templates
        if src in by_cat and dst in by_cat
    ]
    return ConceptGraph(tuple(by_cat.values()), tuple(edges))


FORMAT_CONTRACT = """Return the graph in JSON with two fields, "nodes" and "edges":
{
  "nodes": [{"id": "n1", "category": "TechProblem", "label": "short name", "detail": "one sentence"}],
  "edges": [["n1", "n2", "solves"]]
}
Each edge is [source id, target id, relation]."""


def graph_prompt(steps: Sequence[ReasoningStep], variant: int) -> tuple[str, str]:
    categories = ", ".join(c.value for c in CATEGORY_ORDER)
    relations = ", ".join(r.value for r in RelationType)
    system = (
        "You are an expert patent drafter building a concept graph of an invention.\n"
        f"Node categories: {categories}.\n"
        f"Edge relations (use only these): {relations}.\n"
        "Nodes are specific patent elements such as algorithms or functional modules. "
        "Edges encode functional or causal dependencies between them.\n"
        + FORMAT_CONTRACT
    )
    if variant == 3:
        system += (
            "\nFocus on implicit cross-category dependencies that obvious templates miss, "
            "for example an embodiment that improves a specific effect or a figure that validates a solution."
        )
    body = "\n\n".join(f"[{s.category.value}]\n{s.text}" for s in sorted(steps, key=lambda s: s.position))
    user = f"Candidate graph {variant}. Reasoning steps:\n\n{body}\n\nReturn only the JSON graph."
    return system, user


def build_llm_graph(steps: Sequence[ReasoningStep], gateway: Gateway, variant: int) -> ConceptGraph:
    """Candidates 2 and 3: model-inferred relations, parsed tolerantly."""
    if variant not in (2, 3):
        raise ValueError(f"variant must be 2 or 3, got {variant}")
    system, user = graph_prompt(steps, variant)
    reply = gateway.complete(gateway.request("graph", system, user)).text
    try:
        graph = parse_graph_json(reply)
    except GraphParseError as exc:
        repair = (
            f"{user}\n\nYour previous reply could not be parsed: {exc}. "
            "Reply with a single JSON object containing \"nodes\" and \"edges\"."
        )
        reply = gateway.complete(gateway.request("graph", system, repair)).text
        try:
            graph = parse_graph_json(reply)
        except GraphParseError as exc2:
            log.warning("candidate graph %d unparseable after repair (%s); using empty graph", variant, exc2)
            return ConceptGraph()
    nodes = tuple(replace(n, provenance=frozenset({variant})) for n in graph.nodes)
    return ConceptGraph(nodes, graph.edges)


def _find_graph_object(text: str) -> dict[str, Any]:
    decoder = json.JSONDecoder()
    pos = text.find("{")
    while pos != -1:
        try:
            obj, _ = decoder.raw_decode(text, pos)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict) and "nodes" in obj and "edges" in obj:
            return obj
        pos = text.find("{", pos + 1)
    raise GraphParseError(
        f"no JSON object with 'nodes' and 'edges' found (searched to byte offset {len(text.encode('utf-8'))})",
        len(text.encode("utf-8")),
    )


def _parse_node(entry: Any) -> ConceptNode | None:
    if isinstance(entry, str):
        label, raw_cat, node_id, detail, placeholder = entry, None, None, "", False
    elif isinstance(entry, dict):
        label = str(entry.get("label") or entry.get("name") or "")
        raw_cat = entry.get("category") or entry.get("type")
        node_id = entry.get("id")
        detail = str(entry.get("detail") or "")
        placeholder = bool(entry.get("placeholder", False))
    else:
        log.warning("dropping node entry of type %s", type(entry).__name__)
        return None
    if not label.strip() and not placeholder:
        log.warning("dropping node with empty label: %r", entry)
        return None
    category = None
    if raw_cat is not None:
        try:
            category = Category.parse(str(raw_cat))
        except ValueError:
            category = category_alias(str(raw_cat))
    if category is None:
        category = category_alias(label)
    if category is None:
        log.warning("node %r has no recognizable category; defaulting to Solution", label)
        category = C.SOLUTION
    node_id = str(node_id) if node_id not in (None, "") else make_node_id(category, label)
    return ConceptNode(node_id, category, label, detail, placeholder)


def parse_graph_json(text: str) -> ConceptGraph:
    """Extract a concept graph from free-form model output.

    The first JSON object holding both ``nodes`` and ``edges`` is used; any
    surrounding prose is ignored. Nodes may be bare labels or objects, edges
    ``[src, dst, relation]`` triples (or objects) referring to node ids or
    labels. Unknown relations, dangling endpoints, self-loops and repeated
    node pairs are dropped with a warning, so the result is always valid.
    """
    obj = _find_graph_object(text)
    nodes: dict[str, ConceptNode] = {}
    by_label: dict[str, str] = {}
    for entry in obj.get("nodes") or []:
        node = _parse_node(entry)
        if node is None:
            continue
        if node.id in nodes:
            log.warning("dropping duplicate node id %s", node.id)
            continue
        nodes[node.id] = node
        by_label.setdefault(node.label, node.id)
        by_label.setdefault(node.label.strip().lower(), node.id)

    def resolve(ref: Any) -> str | None:
        ref = str(ref)
        if ref in nodes:
            return ref
        return by_label.get(ref) or by_label.get(ref.strip().lower())

    edges: dict[tuple[str, str], ConceptEdge] = {}
    for entry in obj.get("edges") or []:
        if isinstance(entry, dict):
            raw = (
                entry.get("src", entry.get("source")),
                entry.get("dst", entry.get("target")),
                entry.get("relation", entry.get("type")),
            )
        elif isinstance(entry, (list, tuple)) and len(entry) == 3:
            raw = tuple(entry)
        else:
            log.warning("dropping malformed edge %r", entry)
            continue
        src, dst = resolve(raw[0]), resolve(raw[1])
        try:
            relation = RelationType.parse(str(raw[2]).strip().lower())
        except ValueError:
            log.warning("dropping edge %r: unknown relation %r", entry, raw[2])
            continue
        if src is None or dst is None:
            log.warning("dropping dangling edge %r", entry)
            continue
        if src == dst:
            log.warning("dropping self-loop edge %r", entry)
            continue
        if (src, dst) in edges:
            log.warning("dropping repeated edge %r", entry)
            continue
        edges[(src, dst)] = ConceptEdge(src, dst, relation)
    return ConceptGraph(tuple(nodes.values()), tuple(edges.values()))


def build_candidates(steps: Sequence[ReasoningStep], gateway: Gateway) -> list[ConceptGraph]:
    """The three candidates in index order: rule-based, then model variants 2 and 3."""
    return [build_rule_based_graph(steps), build_llm_graph(steps, gateway, 2), build_llm_graph(steps, gateway, 3)]
