import json
import logging
import math
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patdraft.gateway import Gateway
from patdraft.graph import (
    CATEGORY_ORDER,
    SECTION_ORDER,
    Category,
    ConceptEdge,
    ConceptGraph,
    ConceptNode,
    GateReport,
    Plan,
    RelationType,
    SectionAssignment,
    SectionId,
)
from patdraft import planner
from patdraft.merge import merge_graphs
from patdraft.planner import (
    PlanError,
    PlannerConfig,
    connectivity,
    default_assignment,
    gate,
    ordering_violations,
    parse_plan_reply,
    passes_gate,
    propose_plans,
    semantic_consistency,
)

from test_merge import worked_example_candidates

C = Category
S = SectionId
R = RelationType


def node(cat, label):
    return ConceptNode.create(cat, label)


def plan_of(mapping, order=None):
    """Plan from {SectionId: [node ids]}; absent sections are empty, canonical order by default."""
    assignments = tuple(SectionAssignment(s, tuple(mapping.get(s, ()))) for s in SECTION_ORDER)
    return Plan(assignments, tuple(order or range(len(SECTION_ORDER))))


def entropy_oracle(counts):
    total = sum(counts)
    return -sum((k / total) * math.log(k / total) for k in counts if k)


def full_graph():
    nodes = [node(c, f"{c.value} concept") for c in CATEGORY_ORDER]
    by = {n.category: n.id for n in nodes}
    edges = [
        ConceptEdge(by[C.TECH_PROBLEM], by[C.SOLUTION], R.SOLVES),
        ConceptEdge(by[C.SOLUTION], by[C.IMPLEMENTATION], R.IMPLEMENTS),
        ConceptEdge(by[C.FIGURE], by[C.IMPLEMENTATION], R.IMPLEMENTS),
        ConceptEdge(by[C.IMPLEMENTATION], by[C.EFFECTS], R.CAUSES),
    ]
    return ConceptGraph(tuple(nodes), tuple(edges)), by


class TestDefaultAssignment:
    def test_worked_example_graph(self):
        g = merge_graphs(worked_example_candidates())
        plan = default_assignment(g)
        cats = {a.section: sorted(g.node(i).category.value for i in a.node_ids) for a in plan.assignments}
        assert cats == {
            S.FIELD: ["Field"],
            S.BACKGROUND: ["TechProblem"],
            S.SUMMARY: [],
            S.DETAILED_DESCRIPTION: ["Implementation", "Solution"],
            S.EFFECTS: ["Effects"],
        }
        assert g.node(plan.section(S.FIELD).node_ids[0]).placeholder
        assert plan.order == (0, 1, 2, 3, 4)

    def test_placeholders_only(self):
        g = merge_graphs([ConceptGraph()] * 3)
        plan = default_assignment(g)
        assert sum(1 for a in plan.assignments if not a.is_empty) == 3

    def test_full_graph_fills_every_section(self):
        g, _ = full_graph()
        assert all(not a.is_empty for a in default_assignment(g).assignments)


class TestConnectivity:
    a, b, c = node(C.SOLUTION, "a"), node(C.SOLUTION, "b"), node(C.SOLUTION, "c")

    def test_path_of_three(self):
        g = ConceptGraph((self.a, self.b, self.c), (
            ConceptEdge(self.a.id, self.b.id, R.CAUSES), ConceptEdge(self.b.id, self.c.id, R.CAUSES),
        ))
        per, mean = connectivity(plan_of({S.DETAILED_DESCRIPTION: [self.a.id, self.b.id, self.c.id]}), g)
        assert per[3] == pytest.approx(2 / 6, abs=1e-9)
        # four empty sections contribute 0 each to the mean
        assert mean == pytest.approx((2 / 6) / 5, abs=1e-9)

    def test_singleton(self):
        g = ConceptGraph((self.a,))
        per, _ = connectivity(plan_of({S.FIELD: [self.a.id]}), g)
        assert per == [0.0] * 5

    def test_complete_pair(self):
        g = ConceptGraph((self.a, self.b), (
            ConceptEdge(self.a.id, self.b.id, R.CAUSES), ConceptEdge(self.b.id, self.a.id, R.VALIDATES),
        ))
        per, _ = connectivity(plan_of({S.SUMMARY: [self.a.id, self.b.id]}), g)
        assert per[2] == 1.0

    def test_cross_section_edges_ignored(self):
        g = ConceptGraph((self.a, self.b), (ConceptEdge(self.a.id, self.b.id, R.CAUSES),))
        per, _ = connectivity(plan_of({S.FIELD: [self.a.id], S.SUMMARY: [self.b.id]}), g)
        assert per == [0.0] * 5

    def test_non_partition_rejected(self):
        g = ConceptGraph((self.a, self.b))
        with pytest.raises(PlanError):
            connectivity(plan_of({S.FIELD: [self.a.id]}), g)


class TestConsistency:
    def test_homogeneous(self):
        nodes = [node(C.IMPLEMENTATION, f"impl {i}") for i in range(4)]
        per, _ = semantic_consistency(plan_of({S.DETAILED_DESCRIPTION: [n.id for n in nodes]}), ConceptGraph(tuple(nodes)))
        assert per == [1.0] * 5

    def test_two_types(self):
        nodes = (node(C.SOLUTION, "s"), node(C.IMPLEMENTATION, "i"))
        per, mean = semantic_consistency(plan_of({S.DETAILED_DESCRIPTION: [n.id for n in nodes]}), ConceptGraph(nodes))
        expected = 1 - entropy_oracle([1, 1]) / math.log(9)
        assert per[3] == pytest.approx(expected, abs=1e-6)
        assert per[3] == pytest.approx(0.684535, abs=1e-6)
        assert mean == pytest.approx((4 + expected) / 5, abs=1e-9)

    def test_one_per_category(self):
        g, _ = full_graph()
        per, _ = semantic_consistency(plan_of({S.SUMMARY: g.node_ids}), g)
        assert per[2] == pytest.approx(0.0, abs=1e-12)

    def test_skewed_distribution(self):
        nodes = tuple(node(C.SOLUTION, f"s{i}") for i in range(3)) + (node(C.FIGURE, "f"),)
        per, _ = semantic_consistency(plan_of({S.SUMMARY: [n.id for n in nodes]}), ConceptGraph(nodes))
        assert per[2] == pytest.approx(1 - entropy_oracle([3, 1]) / math.log(9), abs=1e-12)


class TestOrderingViolations:
    def test_embodiment_before_problem(self):
        g, by = full_graph()
        plan = default_assignment(g)
        # DetailedDescription (index 3) ahead of Background (index 1)
        swapped = Plan(plan.assignments, (0, 3, 1, 2, 4))
        problems = ordering_violations(swapped, g)
        assert any("embodiment" in p for p in problems)

    def test_dissociated_figure(self):
        g, by = full_graph()
        g = ConceptGraph(g.nodes, tuple(e for e in g.edges if e.src != by[C.FIGURE]))
        plan = default_assignment(g)
        mapping = {a.section: [i for i in a.node_ids if i != by[C.FIGURE]] for a in plan.assignments}
        mapping[S.SUMMARY].append(by[C.FIGURE])
        problems = ordering_violations(plan_of(mapping), g)
        assert problems == [f"figure {by[C.FIGURE]} in Summary dissociated from implementation"]

    def test_figure_with_edge_to_implementation_ok(self):
        g, by = full_graph()
        plan = default_assignment(g)
        mapping = {a.section: [i for i in a.node_ids if i != by[C.FIGURE]] for a in plan.assignments}
        mapping[S.SUMMARY].append(by[C.FIGURE])
        assert ordering_violations(plan_of(mapping), g) == []

    def test_default_on_full_graph_clean(self):
        g, _ = full_graph()
        assert ordering_violations(default_assignment(g), g) == []

    def test_flow_break(self):
        g, by = full_graph()
        plan = default_assignment(g)
        mapping = {a.section: list(a.node_ids) for a in plan.assignments}
        mapping[S.DETAILED_DESCRIPTION].remove(by[C.SOLUTION])
        mapping[S.EFFECTS].append(by[C.SOLUTION])
        problems = ordering_violations(plan_of(mapping), g)
        assert problems == ["narrative flow: Implementation appears before Solution"]


def scored_graph():
    """Two-section graph where the plans below reach known (C, Sim) values."""
    p = node(C.TECH_PROBLEM, "p")
    s1, s2 = node(C.SOLUTION, "s one"), node(C.SOLUTION, "s two")
    g = ConceptGraph((p, s1, s2), (
        ConceptEdge(p.id, s1.id, R.SOLVES), ConceptEdge(s1.id, s2.id, R.IMPLEMENTS),
    ))
    return g, p, s1, s2


def fixed_scores(monkeypatch, pairs):
    """Violation-free candidates whose (C, Sim) are pinned to ``pairs``."""
    g, _ = full_graph()
    plans = [default_assignment(g) for _ in pairs]
    table = {id(p): cs for p, cs in zip(plans, pairs)}

    def fake(plan, graph, config=None):
        c, sim = table[id(plan)]
        cfg = config or PlannerConfig()
        return GateReport((c,), c, (sim,), sim, passes_gate(c, sim, cfg), 0.5 * c + 0.5 * sim)

    monkeypatch.setattr(planner, "score_plan", fake)
    return g, plans


class TestGate:
    def test_threshold_boundary(self):
        cfg = PlannerConfig()
        assert passes_gate(0.5, 0.6, cfg)
        assert not passes_gate(0.4999, 0.6, cfg)
        assert not passes_gate(0.5, 0.5999, cfg)

    def test_passer_beats_equal_combined_failure(self, monkeypatch):
        g, plans = fixed_scores(monkeypatch, [(0.6, 0.7), (0.4, 0.9)])
        result = gate(plans, g)
        assert (result.selected_index, result.policy) == (0, "passed")

    def test_fallback_picks_highest_combined(self, monkeypatch):
        # combined 0.52 vs 0.58, both below tau_C
        g, plans = fixed_scores(monkeypatch, [(0.44, 0.6), (0.46, 0.7)])
        result = gate(plans, g)
        assert (result.selected_index, result.policy) == (1, "fallback")

    def test_equal_passers_lowest_index(self, monkeypatch):
        g, plans = fixed_scores(monkeypatch, [(0.5, 0.6), (0.7, 0.9), (0.9, 0.7)])
        assert gate(plans, g).selected_index == 1

    def test_fallback_argmax_real_scores(self):
        g, p, s1, s2 = scored_graph()
        together = plan_of({S.DETAILED_DESCRIPTION: [p.id, s1.id, s2.id]})
        split = plan_of({S.BACKGROUND: [p.id], S.DETAILED_DESCRIPTION: [s1.id, s2.id]})
        result = gate([together, split], g)
        assert result.policy == "fallback"
        # together: C = (2/6)/5, Sim = (4 + 1 - H(1/3, 2/3)/ln 9)/5; split: C = (1/2)/5, Sim = 1
        c_together = (2 / 6) / 5
        sim_together = (4 + 1 - entropy_oracle([1, 2]) / math.log(9)) / 5
        assert result.reports[0].combined == pytest.approx(0.5 * c_together + 0.5 * sim_together)
        assert result.reports[1].combined == pytest.approx(0.5 * 0.1 + 0.5 * 1.0)
        assert result.selected_index == 1
        assert result.plan.scores == result.reports[1]

    def test_tie_lowest_index(self):
        g, p, s1, s2 = scored_graph()
        split = plan_of({S.BACKGROUND: [p.id], S.DETAILED_DESCRIPTION: [s1.id, s2.id]})
        assert gate([split, split, split], g, PlannerConfig(tau_c=0, tau_s=0)).selected_index == 0
        assert gate([split, split], g).selected_index == 0

    def test_violators_discarded(self):
        g, by = full_graph()
        bad = Plan(default_assignment(g).assignments, (0, 3, 1, 2, 4))
        result = gate([bad, default_assignment(g)], g, PlannerConfig(tau_c=0, tau_s=0))
        assert result.selected_index == 1
        assert result.reports[0].violations

    def test_all_violate_uses_default(self, caplog):
        g, _ = full_graph()
        bad = Plan(default_assignment(g).assignments, (0, 3, 1, 2, 4))
        with caplog.at_level(logging.WARNING):
            result = gate([bad, bad], g)
        assert result.policy == "default" and result.selected_index is None
        assert result.plan == default_assignment(g)
        assert "violate" in caplog.text

    def test_empty_list(self):
        with pytest.raises(PlanError):
            gate([], ConceptGraph())

    def test_report_json(self):
        g, _ = full_graph()
        data = json.loads(json.dumps(gate([default_assignment(g)], g).to_json()))
        assert data["selected_index"] == 0
        assert set(data["candidates"][0]) >= {"index", "connectivity", "consistency", "passed", "violations"}


class TestProposePlans:
    def test_k1_no_calls(self):
        g, _ = full_graph()
        gw = Gateway(backend=lambda r: pytest.fail("no call expected"), mode="live")
        assert propose_plans(g, gw, PlannerConfig(k=1)) == [default_assignment(g)]
        assert gw.call_counts() == {}

    def test_bad_replies_replaced(self, caplog):
        g, by = full_graph()
        partial = json.dumps({"sections": [{"section": "Field", "node_ids": [by[C.FIELD]]}]})
        replies = iter(["nonsense", partial, json.dumps(_single_section(g)), "{}"])
        gw = Gateway(backend=lambda r: next(replies), mode="live")
        with caplog.at_level(logging.WARNING):
            plans = propose_plans(g, gw, PlannerConfig(k=5))
        default = default_assignment(g)
        assert len(plans) == 5
        assert plans[0] == plans[1] == plans[2] == plans[4] == default
        assert plans[3] != default
        assert caplog.text.count("rejected") == 3

    def test_prompt_lists_nodes_and_sections(self, live_gateway, fake_model):
        g, by = full_graph()
        propose_plans(g, live_gateway, PlannerConfig(k=2))
        [request] = fake_model.requests
        for nid in by.values():
            assert nid in request.user_text
        assert all(s.value in request.system_text for s in SectionId)
        assert '"node_ids"' in request.system_text


def _single_section(g):
    return {"sections": [{"section": "Summary", "node_ids": g.node_ids}]}


class TestParsePlanReply:
    def test_order_by_name(self):
        g, by = full_graph()
        body = {
            "sections": [{"section": "Effects", "node_ids": g.node_ids}],
            "order": ["Effects"],
        }
        plan = parse_plan_reply("plan:\n" + json.dumps(body), g)
        assert [a.section for a in plan.ordered()][0] == S.EFFECTS
        assert len(plan.assignments) == 5

    def test_duplicate_node_rejected(self):
        g, by = full_graph()
        body = {"sections": [
            {"section": "Field", "node_ids": g.node_ids},
            {"section": "Summary", "node_ids": [by[C.FIELD]]},
        ]}
        with pytest.raises(PlanError):
            parse_plan_reply(json.dumps(body), g)

    def test_bad_order_rejected(self):
        g, _ = full_graph()
        body = {"sections": [{"section": "Field", "node_ids": g.node_ids}], "order": [0, 0]}
        with pytest.raises(PlanError):
            parse_plan_reply(json.dumps(body), g)


@st.composite
def graph_and_plan(draw):
    count = draw(st.integers(0, 9))
    nodes = tuple(node(draw(st.sampled_from(CATEGORY_ORDER)), f"n{i}") for i in range(count))
    ids = [n.id for n in nodes]
    edges = {}
    if count > 1:
        for s, d in draw(st.lists(st.tuples(st.sampled_from(ids), st.sampled_from(ids)), max_size=15)):
            if s != d:
                edges.setdefault((s, d), ConceptEdge(s, d, draw(st.sampled_from(list(R)))))
    g = ConceptGraph(nodes, tuple(edges.values()))
    sections = draw(st.lists(st.sampled_from(SECTION_ORDER), min_size=count, max_size=count))
    mapping = {}
    for nid, s in zip(ids, sections):
        mapping.setdefault(s, []).append(nid)
    order = draw(st.permutations(range(5)))
    return g, plan_of(mapping, order)


@settings(max_examples=80, deadline=None)
@given(graph_and_plan())
def test_scores_in_unit_interval(case):
    g, plan = case
    for per, mean in (connectivity(plan, g), semantic_consistency(plan, g)):
        assert all(0.0 <= x <= 1.0 for x in per)
        assert 0.0 <= mean <= 1.0


@settings(max_examples=80, deadline=None)
@given(graph_and_plan(), st.data())
def test_adding_internal_edge_never_lowers_connectivity(case, data):
    g, plan = case
    existing = {(e.src, e.dst) for e in g.edges}
    pairs = [
        (s, d) for a in plan.assignments for s in a.node_ids for d in a.node_ids if s != d and (s, d) not in existing
    ]
    if not pairs:
        return
    s, d = data.draw(st.sampled_from(pairs))
    denser = ConceptGraph(g.nodes, g.edges + (ConceptEdge(s, d, R.CAUSES),))
    assert connectivity(plan, denser)[1] >= connectivity(plan, g)[1]


@settings(max_examples=80, deadline=None)
@given(graph_and_plan(), st.data())
def test_homogenising_a_section_never_lowers_consistency(case, data):
    g, plan = case
    section = data.draw(st.sampled_from(plan.assignments))
    category = data.draw(st.sampled_from(CATEGORY_ORDER))
    members = set(section.node_ids)
    nodes = tuple(replace(n, category=category) if n.id in members else n for n in g.nodes)
    assert semantic_consistency(plan, ConceptGraph(nodes, g.edges))[1] >= semantic_consistency(plan, g)[1] - 1e-12


@settings(max_examples=50, deadline=None)
@given(graph_and_plan(), st.data())
def test_gate_never_selects_violator(case, data):
    g, first = case
    plans = [first]
    for _ in range(data.draw(st.integers(0, 3))):
        order = data.draw(st.permutations(range(5)))
        plans.append(Plan(data.draw(st.sampled_from(plans)).assignments, tuple(order)))
    result = gate(plans, g)
    assert ordering_violations(result.plan, g) == []
    assert gate(plans, g) == result
