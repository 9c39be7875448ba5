import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_graph, random_grounding
from mamo import query as q
from mamo.errors import ParseError, StructuralError, UnsupportedStructureError
from mamo.kg import KnowledgeGraph
from mamo.oracle import evaluate

GOLDEN = json.loads((Path(__file__).parent / "data" / "categories.json").read_text())
SCHEME_COLUMNS = {"R": 2, "L": 3, "I": 4, "O": 5, "BI": 6, "BO": 7}
NAMES = [t.name for t in q.builtin_templates()]


def test_parse_2p():
    t = q.parse_template("(p,r1,(p,r0,e0))")
    assert t.tree == q.Projection(1, q.Projection(0, q.Anchor(0)))
    assert t.placeholder_count == (1, 2)


def test_2in_semantics_on_hand_graph():
    # 5 entities: r0 from 0 reaches {1,2,3}; r1 from 4 reaches {2}
    g = KnowledgeGraph.from_triples({(0, 0, 1), (0, 0, 2), (0, 0, 3), (4, 1, 2)}, 5, 2)
    tree = q.parse_template("(i,(p,r0,e0),(n,(p,r1,e1)))").bind([0, 4], [0, 1])
    assert evaluate(tree, g) == {1, 3}
    assert q.get_template("2in").text == "(i,(p,r0,e0),(n,(p,r1,e1)))"


@pytest.mark.parametrize("text", ["(n,(p,r0,e0))", "e0", "(p,r0,(n,(p,r1,e0)))",
                                  "(u,(n,(p,r0,e0)),(p,r1,e1))"])
def test_structural_errors(text):
    with pytest.raises(StructuralError):
        q.parse_template(text)


@pytest.mark.parametrize("text,pos", [("(p,r0,e0", 8), ("(x,r0,e0)", 1), ("(p,r0,e0))", 9), ("(i,(p,r0,e0))", 1)])
def test_parse_errors_carry_position(text, pos):
    with pytest.raises(ParseError) as info:
        q.parse_template(text)
    assert info.value.position == pos


@pytest.mark.parametrize("text", ["(p,r0,e0)", "(p,r1,e0)", "(i,(p,r0,e0),(p,r1,e0))"])
def test_placeholders_must_be_contiguous_and_distinct(text):
    if text == "(p,r0,e0)":
        q.parse_template(text)
    else:
        with pytest.raises(StructuralError):
            q.parse_template(text)


def test_seventeen_builtins_with_conventional_counts():
    counts = {t.name: t.placeholder_count for t in q.builtin_templates()}
    assert len(counts) == 17
    assert counts["3i"] == (3, 3) and counts["inp"] == (2, 3) and counts["pni"] == (2, 3)
    assert counts["1p"] == (1, 1) and counts["6p"] == (1, 6) and counts["2u"] == (2, 2)


def test_builtin_lookups():
    assert q.get_template("1p").tree == q.Projection(0, q.Anchor(0))
    node, depth = q.get_template("6p").tree, 0
    while isinstance(node, q.Projection):
        node, depth = node.child, depth + 1
    assert depth == 6 and node == q.Anchor(0)


def test_pni_semantics_on_hand_graph():
    # 0 -r0-> 1 -r1-> {2, 3}; 4 -r2-> {2, 3, 5}
    triples = {(0, 0, 1), (1, 1, 2), (1, 1, 3), (4, 2, 2), (4, 2, 3), (4, 2, 5)}
    g = KnowledgeGraph.from_triples(triples, 6, 3)
    tree = q.get_template("pni").bind([0, 4], [0, 1, 2])
    assert tree == q.Intersection(
        (q.Negation(q.Projection(1, q.Projection(0, q.Anchor(0)))), q.Projection(2, q.Anchor(4)))
    )
    assert evaluate(tree, g) == {5}


@pytest.mark.parametrize("name", NAMES)
def test_parse_serialize_round_trip(name):
    t = q.get_template(name)
    assert q.parse_template(t.text).tree == t.tree
    assert q.serialize(q.parse_tree(q.serialize(t.tree))) == t.text


def test_registry_json():
    reg = json.loads(q.registry_json())
    assert reg["pin"] == "(i,(p,r1,(p,r0,e0)),(n,(p,r2,e1)))" and len(reg) == 17


def test_2p_sites():
    outer, inner = q.enumerate_projection_sites(q.get_template("2p").tree)
    assert (outer.input_kind, outer.output_kind, outer.root_distance, outer.leaf_distance) == (
        q.InputKind.PROJECTION, q.OutputKind.ANSWER, 1, 2)
    assert (inner.input_kind, inner.output_kind, inner.root_distance, inner.leaf_distance) == (
        q.InputKind.ENTITY, q.OutputKind.PROJECTION, 2, 1)


def test_figure_one_query_has_three_input_types():
    tree = q.parse_tree("(p,r3,(i,(p,r0,e0),(n,(p,r2,(p,r1,e1)))))")
    kinds = [s.input_kind.value for s in q.enumerate_projection_sites(tree)]
    assert sorted(kinds) == ["Entity", "Entity", "Intersection", "Projection"]
    assert len({q.categorize(s, "I") for s in q.enumerate_projection_sites(tree)}) == 3


def test_3i_sites():
    sites = q.enumerate_projection_sites(q.get_template("3i").tree)
    assert len(sites) == 3
    assert all((s.input_kind.value, s.output_kind.value, s.root_distance, s.leaf_distance)
               == ("Entity", "Intersection", 2, 1) for s in sites)


def test_categorize_examples():
    outer, inner = q.enumerate_projection_sites(q.get_template("2p").tree)
    assert q.categorize(inner, "I").label == "P_e" and q.categorize(outer, "I").label == "P_p"
    deepest = q.enumerate_projection_sites(q.get_template("6p").tree)[-1]
    assert deepest.root_distance == 6 and q.categorize(deepest, "R", 3).category == 3
    pni = q.enumerate_projection_sites(q.get_template("pni").tree)
    feeding_negation = [s for s in pni if s.path == (0, 0)][0]
    assert q.categorize(feeding_negation, "O").category == "Negation"
    assert q.categorize(feeding_negation, "BO").category == "NonAnswer"


@pytest.mark.parametrize("name", NAMES)
def test_categorization_golden_file(name):
    sites = q.enumerate_projection_sites(q.get_template(name).tree)
    rows = GOLDEN[name]
    assert [(s.branch, list(s.path)) for s in sites] == [(r[0], r[1]) for r in rows]
    for site, row in zip(sites, rows):
        for scheme, col in SCHEME_COLUMNS.items():
            key = q.categorize(site, scheme, GOLDEN["_depth_cap"])
            assert key.category == row[col], (name, site.path, scheme)


@pytest.mark.parametrize("name", NAMES)
def test_site_invariants_and_closed_kind_sets(name):
    for s in q.enumerate_projection_sites(q.get_template(name).tree):
        assert isinstance(q.node_at(q.dnf_decompose(s.query)[0], s.path), q.Projection)
        assert (s.root_distance == 1) == (s.output_kind is q.OutputKind.ANSWER)
        assert (s.input_kind is q.InputKind.ENTITY) == (s.leaf_distance == 1)
        assert s.input_kind.value in {"Entity", "Projection", "Intersection"}
        assert s.output_kind.value in {"Projection", "Intersection", "Negation", "Answer"}
        for scheme in q.SCHEMES:
            key = q.categorize(s, scheme)
            assert key == q.categorize(s, scheme)
            assert key in q.scheme_categories(scheme)


def test_dnf_examples():
    parts = q.dnf_decompose(q.get_template("2u").tree)
    assert [q.serialize(p) for p in parts] == ["(p,r0,e0)", "(p,r1,e1)"]
    parts = q.dnf_decompose(q.get_template("up").tree)
    assert [q.serialize(p) for p in parts] == ["(p,r2,(p,r0,e0))", "(p,r2,(p,r1,e1))"]
    three_i = q.get_template("3i").tree
    assert q.dnf_decompose(three_i) == [three_i]


def test_union_under_negation_unsupported():
    tree = q.Intersection((q.Projection(0, q.Anchor(0)),
                           q.Negation(q.Union((q.Projection(1, q.Anchor(1)), q.Projection(2, q.Anchor(2)))))))
    with pytest.raises(UnsupportedStructureError):
        q.dnf_decompose(tree)


@pytest.mark.parametrize("name", ["2u", "up"])
def test_dnf_preserves_answer_sets(name):
    rng = np.random.default_rng(11)
    template = q.get_template(name)
    for i in range(1000):
        if i % 50 == 0:
            g = random_graph(rng, 50, 4, 400)
        tree = random_grounding(template, g, rng)
        parts = q.dnf_decompose(tree)
        assert set().union(*(evaluate(p, g) for p in parts)) == evaluate(tree, g)


trees = st.recursive(
    st.builds(q.Anchor, st.integers(0, 3)),
    lambda inner: st.one_of(
        st.builds(q.Projection, st.integers(0, 3), inner),
        st.builds(lambda cs: q.Intersection(tuple(cs)), st.lists(inner, min_size=2, max_size=3)),
    ),
    max_leaves=6,
).filter(lambda t: isinstance(t, (q.Projection, q.Intersection)))


@settings(max_examples=200, deadline=None)
@given(trees)
def test_random_tree_round_trip_and_total_categorization(tree):
    assert q.parse_tree(q.serialize(tree)) == tree
    for s in q.enumerate_projection_sites(tree):
        assert s.root_distance >= 1 and s.leaf_distance >= 1
        for scheme in q.SCHEMES:
            assert q.categorize(s, scheme) in q.scheme_categories(scheme)
