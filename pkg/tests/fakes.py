"""Scripted stand-in for a language model.

Replies are a pure function of the request, so recording through this
backend and replaying gives byte-identical runs. Used to build the
checked-in replay cache under ``tests/fixtures/sample``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from patdraft.gateway import PromptRequest
from patdraft.induction import CATEGORY_PRIMERS, first_sentence
from patdraft.graph import Category

STEP_TEXTS = {
    Category.FIELD: "wireless receivers that suppress channel noise with an adaptive filter.",
    Category.TECH_PROBLEM: (
        "fixed filters cannot track time-varying channel noise. Unlike the proposed method, "
        "prior receivers lose signal quality when interference statistics drift."
    ),
    Category.PRIOR_ART: "static Wiener filters estimated once per frame. They assume stationary noise.",
    Category.NOVELTY: "a step-size controller that adapts to measured noise variance.",
    Category.SOLUTION: "an adaptive noise filter whose coefficients follow a variance-driven step size.",
    Category.IMPLEMENTATION: "a variance estimator feeding a least-mean-squares update loop on a DSP core.",
    Category.EFFECTS: "a 4 dB gain in signal-to-noise ratio under drifting interference.",
    Category.EMBODIMENT: "a handset receiver that runs the filter per antenna branch.",
    Category.FIGURE: "a block diagram of the variance estimator and update loop.",
}


def _category_of(system_text: str) -> Category:
    match = re.search(r"Reasoning step \d of 9: (\w+)\.", system_text)
    assert match, system_text
    return Category(match.group(1))


def _steps_in(user_text: str) -> dict[Category, str]:
    steps = {}
    for match in re.finditer(r"^\[(\w+)\]\n(.+?)(?=\n\n\[|\n\nReturn|\Z)", user_text, re.M | re.S):
        try:
            steps[Category(match.group(1))] = match.group(2).strip()
        except ValueError:
            continue
    return steps


def _plan_nodes(user_text: str) -> list[tuple[str, str]]:
    return re.findall(r"^- (\S+) \[(\w+)\] ", user_text, re.M)


@dataclass
class FakeModel:
    """Deterministic replies keyed on the request tag.

    ``judge_score`` fixes every judge reply; ``empty_steps`` makes those
    reasoning steps reply with whitespace.
    """

    judge_score: int = 90
    empty_steps: frozenset[Category] = frozenset()
    requests: list[PromptRequest] = field(default_factory=list)

    def __call__(self, request: PromptRequest) -> str:
        self.requests.append(request)
        return getattr(self, f"_{request.tag}")(request)

    def _induction(self, request: PromptRequest) -> str:
        category = _category_of(request.system_text)
        if category in self.empty_steps:
            return "  "
        return f"{CATEGORY_PRIMERS[category]} {STEP_TEXTS[category]}"

    def _graph(self, request: PromptRequest) -> str:
        steps = _steps_in(request.user_text)
        variant = 3 if "Candidate graph 3" in request.user_text else 2
        keep = [Category.TECH_PROBLEM, Category.SOLUTION, Category.IMPLEMENTATION, Category.EFFECTS]
        if variant == 3:
            keep += [Category.EMBODIMENT, Category.FIGURE]
        nodes = [
            {"id": c.value, "category": c.value, "label": first_sentence(steps[c]), "detail": steps[c]}
            for c in keep
            if c in steps
        ]
        edges = [
            ["TechProblem", "Solution", "solves"],
            ["Solution", "Implementation", "implements"],
            ["Implementation", "Effects", "causes"] if variant == 2 else ["Implementation", "Effects", "improves"],
        ]
        if variant == 3:
            edges += [["Effects", "TechProblem", "validates"], ["Figure", "Implementation", "implements"],
                      ["Embodiment", "Solution", "implements"]]
        return "Here is the graph:\n```json\n" + json.dumps({"nodes": nodes, "edges": edges}, indent=1) + "\n```"

    def _plan(self, request: PromptRequest) -> str:
        index = int(re.search(r"Candidate plan (\d+) of", request.user_text).group(1))
        nodes = _plan_nodes(request.user_text)
        conventional = {
            "Field": "Field", "TechProblem": "Background", "PriorArt": "Background", "Novelty": "Summary",
            "Solution": "DetailedDescription", "Implementation": "DetailedDescription",
            "Embodiment": "DetailedDescription", "Figure": "DetailedDescription", "Effects": "Effects",
        }
        if index == 2:
            mapping = dict(conventional, Novelty="Background")
        elif index == 3:
            # embodiments ahead of the problem: must be rejected by the ordering rules
            mapping = dict(conventional, Embodiment="Field")
        elif index == 4:
            mapping = dict(conventional, Effects="DetailedDescription")
        else:
            return "I could not decide on a plan."
        sections: dict[str, list[str]] = {}
        for node_id, cat in nodes:
            sections.setdefault(mapping[cat], []).append(node_id)
        payload = {
            "sections": [{"section": s, "node_ids": ids} for s, ids in sections.items()],
        }
        return json.dumps(payload)

    def _generate(self, request: PromptRequest) -> str:
        labels = re.findall(r"^\[\w+\] (.+?)(?::|$)", request.user_text, re.M)
        opener = re.search(r'boilerplate: "(.+?) \.\.\."', request.system_text).group(1)
        body = " ".join(f"The invention includes {label.rstrip('.')}." for label in labels)
        return f"{opener} the described system. {body}"

    def _judge(self, request: PromptRequest) -> str:
        return f"Score: {self.judge_score} - consistent with the listed concepts"

    def _merge(self, request: PromptRequest) -> str:
        return "not supported"
