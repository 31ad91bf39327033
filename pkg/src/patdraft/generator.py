"""Graph-conditioned paragraph generation with validation and bounded regeneration."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .gateway import Gateway, GatewayError, PromptRequest
from .graph import (
    Category,
    ConceptGraph,
    Plan,
    SectionAssignment,
    SectionId,
    induced_subgraph,
    label_tokens,
    linearize,
    sorted_nodes,
)

log = logging.getLogger(__name__)

LABEL_MATCH_RATIO = 0.6

# Removed from labels before coverage matching.
STOPWORDS = frozenset(
    """
    a an the and or but nor of to in on at by for from with without into onto over under
    as is are was were be been being this that these those it its their there which who
    whom whose what when where how than then thus such via per each any all some no not
    can may might will would shall should must do does did has have had
    """.split()
)

SECTION_HEADINGS: dict[SectionId, str] = {
    SectionId.FIELD: "Field of the Invention",
    SectionId.BACKGROUND: "Background",
    SectionId.SUMMARY: "Summary",
    SectionId.DETAILED_DESCRIPTION: "Detailed Description",
    SectionId.EFFECTS: "Effects",
}

FIGURE_DIRECTIVE = (
    'Refer to the figures explicitly, for example "As shown in Figure 1, ..." '
    'or "Figure 1 illustrates ...", and keep figure references consistent.'
)


@dataclass(frozen=True)
class SectionTemplate:
    section: SectionId
    instruction_text: str
    boilerplate_openers: tuple[str, ...]
    few_shot_refs: tuple[str, ...] = ()


SECTION_TEMPLATES: dict[SectionId, SectionTemplate] = {
    SectionId.FIELD: SectionTemplate(
        SectionId.FIELD,
        "Write the Field of the Invention paragraph. Be concise and technically specific.",
        ("The present invention relates to",),
    ),
    SectionId.BACKGROUND: SectionTemplate(
        SectionId.BACKGROUND,
        "Write the Background paragraph. Describe the prior art, then frame the technical problem explicitly.",
        ("According to the prior art", "However, such technology has the following problems"),
    ),
    SectionId.SUMMARY: SectionTemplate(
        SectionId.SUMMARY,
        "Write the Summary paragraph stating the object of the invention.",
        ("An object of the present invention is to provide",),
    ),
    SectionId.DETAILED_DESCRIPTION: SectionTemplate(
        SectionId.DETAILED_DESCRIPTION,
        "Write the Detailed Description paragraph. Describe multiple embodiments, include at least one "
        'alternative introduced with "In another embodiment", and repeat the key ideas across embodiments.',
        ("According to one embodiment of the present invention", "In another embodiment"),
    ),
    SectionId.EFFECTS: SectionTemplate(
        SectionId.EFFECTS,
        "Write the Effects paragraph concluding with the technical effects of the invention.",
        ("Therefore, according to the present invention",),
    ),
}


class GenerationError(RuntimeError):
    def __init__(self, message: str, section: SectionId):
        super().__init__(message)
        self.section = section


class FewShotStore:
    """Section-tagged exemplars on disk: ``<root>/<SectionId>/<name>.json``.

    Each file holds ``{"input": ..., "output": ...}``. A missing root is an
    empty store.
    """

    def __init__(self, root: str | Path | None = None, max_examples: int = 2):
        self.root = Path(root) if root else None
        self.max_examples = max_examples

    def exemplars(self, section: SectionId, refs: Sequence[str] = ()) -> tuple[tuple[str, str], ...]:
        if self.root is None:
            return ()
        folder = self.root / section.value
        if not folder.is_dir():
            return ()
        if refs:
            paths = [folder / f"{ref}.json" for ref in refs]
        else:
            paths = sorted(folder.glob("*.json"))[: self.max_examples]
        out = []
        for path in paths:
            data = json.loads(path.read_text(encoding="utf-8"))
            out.append((str(data["input"]), str(data["output"])))
        return tuple(out)


@dataclass(frozen=True)
class GeneratorConfig:
    threshold_entail: float = 0.7
    threshold_cover: float = 0.8
    max_attempts: int = 3
    concurrent_sections: bool = False

    def __post_init__(self) -> None:
        for name in ("threshold_entail", "threshold_cover"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} {value} outside [0, 1]")
        if self.max_attempts < 1:
            raise ValueError(f"max_attempts must be >= 1, got {self.max_attempts}")


@dataclass(frozen=True)
class ValidationReport:
    entailment_score: float
    coverage: float
    missing_concepts: tuple[str, ...]
    threshold_entail: float = 0.7
    threshold_cover: float = 0.8
    justification: str = ""

    @property
    def accepted(self) -> bool:
        return self.entailment_score >= self.threshold_entail and self.coverage >= self.threshold_cover

    def to_json(self) -> dict[str, Any]:
        return {
            "entailment_score": self.entailment_score,
            "coverage": self.coverage,
            "missing_concepts": list(self.missing_concepts),
            "threshold_entail": self.threshold_entail,
            "threshold_cover": self.threshold_cover,
            "justification": self.justification,
        }


@dataclass(frozen=True)
class DraftParagraph:
    section: SectionId
    text: str
    attempts: int
    entailment_score: float
    coverage: float
    flagged: bool
    report: ValidationReport

    def to_json(self) -> dict[str, Any]:
        return {
            "section": self.section.value,
            "attempts": self.attempts,
            "entailment_score": self.entailment_score,
            "coverage": self.coverage,
            "flagged": self.flagged,
            "validation": self.report.to_json(),
        }


@dataclass(frozen=True)
class DraftDocument:
    paragraphs: tuple[DraftParagraph, ...]
    plan_ref: Plan
    graph_ref: ConceptGraph
    skipped_sections: tuple[SectionId, ...] = field(default=())

    @property
    def flagged_count(self) -> int:
        return sum(p.flagged for p in self.paragraphs)

    def to_markdown(self) -> str:
        parts = ["# Description", ""]
        for p in self.paragraphs:
            parts += [f"## {SECTION_HEADINGS[p.section]}", "", p.text.strip(), ""]
        return "\n".join(parts)

    def report_json(self) -> dict[str, Any]:
        return {
            "paragraphs": [p.to_json() for p in self.paragraphs],
            "skipped_sections": [s.value for s in self.skipped_sections],
            "flagged": self.flagged_count,
        }


def _content_tokens(label: str) -> list[str]:
    tokens = label_tokens(label)
    content = [t for t in tokens if t not in STOPWORDS]
    return content or tokens


def token_coverage(paragraph_text: str, subgraph: ConceptGraph) -> tuple[float, list[str]]:
    """Share of non-placeholder nodes whose label is represented in the text.

    A node counts when at least 60% of its label's content tokens occur in
    the normalized text. Appending whitespace-separated text can only raise
    the score.
    """
    text_tokens = set(label_tokens(paragraph_text))
    nodes = [n for n in sorted_nodes(subgraph.nodes) if not n.placeholder]
    if not nodes:
        return 1.0, []
    missing = []
    for node in nodes:
        tokens = _content_tokens(node.label)
        if not tokens:
            continue
        hits = sum(t in text_tokens for t in tokens)
        if hits / len(tokens) < LABEL_MATCH_RATIO:
            missing.append(node.label)
    return (len(nodes) - len(missing)) / len(nodes), missing


def judge_prompt(paragraph_text: str, subgraph: ConceptGraph) -> tuple[str, str]:
    system = (
        "You are a patent examiner checking whether a paragraph faithfully expresses a set of concepts "
        "and relations without contradicting or omitting them. Reply with a fidelity score from 0 to 100 "
        "followed by a one-line justification, e.g. 'Score: 85 - faithful, omits the sensor detail'."
    )
    user = f"Concepts and relations:\n{linearize(subgraph)}\n\nParagraph:\n{paragraph_text}"
    return system, user


_INT = re.compile(r"-?\d+")


def parse_judge_reply(text: str) -> tuple[float, str] | None:
    match = _INT.search(text)
    if match is None:
        return None
    score = min(100, max(0, int(match.group())))
    rest = text[match.end():].strip().splitlines()
    justification = rest[0].strip(" -:—–.") if rest else ""
    return score / 100.0, justification


def judge_paragraph(paragraph_text: str, subgraph: ConceptGraph, gateway: Gateway) -> tuple[float, str]:
    system, user = judge_prompt(paragraph_text, subgraph)
    parsed = parse_judge_reply(gateway.complete(gateway.request("judge", system, user)).text)
    if parsed is None:
        retry = user + "\n\nYour previous reply had no numeric score. Start your reply with an integer 0-100."
        parsed = parse_judge_reply(gateway.complete(gateway.request("judge", system, retry)).text)
    if parsed is None:
        log.warning("judge reply had no score after retry; scoring 0.0")
        return 0.0, ""
    return parsed


def entailment_check(paragraph_text: str, subgraph: ConceptGraph, gateway: Gateway) -> float:
    """Model-judged fidelity of the paragraph to the subgraph, in [0, 1]."""
    return judge_paragraph(paragraph_text, subgraph, gateway)[0]


def assemble_prompt(
    subgraph: ConceptGraph,
    template: SectionTemplate,
    few_shot_store: FewShotStore | None = None,
    gateway: Gateway | None = None,
    guidance: str = "",
) -> PromptRequest:
    if not subgraph.nodes:
        raise GenerationError("cannot generate a paragraph for an empty section", template.section)
    openers = " ".join(f'"{o} ..."' for o in template.boilerplate_openers)
    lines = [
        "Using the following concepts and relations, write one paragraph of a patent description.",
        template.instruction_text,
        f"Use the patent boilerplate: {openers}",
    ]
    if template.section == SectionId.DETAILED_DESCRIPTION and subgraph.nodes_of(Category.FIGURE):
        lines.append(FIGURE_DIRECTIVE)
    lines.append("Mention every listed concept by name. Do not introduce facts that are not in the concepts.")
    system = "\n".join(lines)
    user = linearize(subgraph)
    if guidance:
        user = f"{user}\n\n{guidance}"
    shots = (few_shot_store or FewShotStore()).exemplars(template.section, template.few_shot_refs)
    if gateway is not None:
        return gateway.request("generate", system, user, shots)
    return PromptRequest(system, user, shots, tag="generate")


def _guidance(report: ValidationReport) -> str:
    parts = ["The previous draft was rejected."]
    if report.missing_concepts:
        parts.append("It omitted these concepts: " + "; ".join(report.missing_concepts) + ".")
    if report.justification:
        parts.append(f"Reviewer feedback: {report.justification}")
    parts.append("Rewrite the paragraph to fix these issues.")
    return " ".join(parts)


def generate_section(
    assignment: SectionAssignment,
    graph: ConceptGraph,
    template: SectionTemplate,
    gateway: Gateway,
    config: GeneratorConfig | None = None,
    few_shot_store: FewShotStore | None = None,
) -> DraftParagraph:
    """Generate, validate, and regenerate up to ``max_attempts`` times.

    When no attempt is accepted the best one (entailment + coverage, earliest
    on ties) is returned flagged.
    """
    config = config or GeneratorConfig()
    if assignment.is_empty:
        raise GenerationError("cannot generate a paragraph for an empty section", assignment.section)
    subgraph = induced_subgraph(graph, assignment.node_ids)
    best: tuple[float, str, ValidationReport, int] | None = None
    report: ValidationReport | None = None
    for attempt in range(1, config.max_attempts + 1):
        guidance = _guidance(report) if report is not None else ""
        request = assemble_prompt(subgraph, template, few_shot_store, gateway, guidance)
        try:
            text = gateway.complete(request).text.strip()
            score, why = judge_paragraph(text, subgraph, gateway)
        except GatewayError as exc:
            raise GatewayError(f"section {assignment.section.value}: {exc}", tag=exc.tag) from exc
        coverage, missing = token_coverage(text, subgraph)
        report = ValidationReport(
            score, coverage, tuple(missing), config.threshold_entail, config.threshold_cover, why
        )
        if report.accepted:
            return DraftParagraph(assignment.section, text, attempt, score, coverage, False, report)
        total = score + coverage
        if best is None or total > best[0]:
            best = (total, text, report, attempt)
    assert best is not None
    _, text, best_report, _ = best
    log.warning(
        "section %s flagged after %d attempts (entailment %.2f, coverage %.2f)",
        assignment.section.value,
        config.max_attempts,
        best_report.entailment_score,
        best_report.coverage,
    )
    return DraftParagraph(
        assignment.section,
        text,
        config.max_attempts,
        best_report.entailment_score,
        best_report.coverage,
        True,
        best_report,
    )


def generate_document(
    plan: Plan,
    graph: ConceptGraph,
    gateway: Gateway,
    config: GeneratorConfig | None = None,
    few_shot_store: FewShotStore | None = None,
    templates: dict[SectionId, SectionTemplate] | None = None,
) -> DraftDocument:
    config = config or GeneratorConfig()
    templates = templates or SECTION_TEMPLATES
    todo = [a for a in plan.ordered() if not a.is_empty]
    skipped = tuple(a.section for a in plan.ordered() if a.is_empty)
    for section in skipped:
        log.info("section %s is empty; skipped", section.value)

    def run(a: SectionAssignment) -> DraftParagraph:
        return generate_section(a, graph, templates[a.section], gateway, config, few_shot_store)

    if config.concurrent_sections:
        with ThreadPoolExecutor() as pool:
            paragraphs = tuple(pool.map(run, todo))
    else:
        paragraphs = tuple(run(a) for a in todo)
    return DraftDocument(paragraphs, plan, graph, skipped)
