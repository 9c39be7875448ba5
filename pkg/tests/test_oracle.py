import filecmp

import numpy as np
import pytest

from helpers import brute_force_answers, random_graph, random_grounding
from mamo import query as q
from mamo.errors import SamplingExhaustedError, ValidationError
from mamo.kg import GraphSplit, KnowledgeGraph, generate_synthetic_kg
from mamo.oracle import (
    EVAL_ONLY,
    FewShotDataset,
    GroundedQuery,
    build_fewshot_dataset,
    evaluate,
    ground,
    retained_count,
)

NAMES = [t.name for t in q.builtin_templates()]


def test_evaluate_two_hop_chase():
    g = KnowledgeGraph.from_triples({(0, 0, 1), (1, 1, 2)}, 3, 2)
    assert evaluate(q.get_template("2p").bind([0], [0, 1]), g) == {2}


def test_evaluate_complement_under_intersection():
    g = KnowledgeGraph.from_triples({(0, 0, 1), (0, 1, 0), (0, 1, 1), (0, 1, 2)}, 3, 2)
    tree = q.parse_tree("(i,(p,r1,e0),(n,(p,r0,e0)))")
    assert evaluate(tree, g) == {0, 2}


def test_evaluate_rejects_out_of_range_ids():
    g = KnowledgeGraph.from_triples({(0, 0, 1)}, 3, 1)
    with pytest.raises(ValidationError):
        evaluate(q.Projection(0, q.Anchor(9)), g)
    with pytest.raises(ValidationError):
        evaluate(q.Projection(4, q.Anchor(0)), g)


@pytest.mark.parametrize("name", NAMES)
def test_evaluate_matches_quantifier_enumeration(name):
    rng = np.random.default_rng([7, NAMES.index(name)])
    template = q.get_template(name)
    for i in range(100):
        if i % 10 == 0:
            n = int(rng.integers(5, 51))
            g = random_graph(rng, n, int(rng.integers(1, 5)), int(rng.integers(n, 4 * n)))
            closed = GraphSplit.closed(g)
        if i % 2 and len(g.entities_with_incoming):
            found = ground(template, closed, rng, require_hard=False, max_answer_fraction=1.0)
            tree = found.tree
        else:
            tree = random_grounding(template, g, rng)
        assert evaluate(tree, g) == brute_force_answers(tree, g)


def test_ground_1p_without_holdout_has_no_hard_answers():
    split = generate_synthetic_kg(40, 2, 60, 0.0, 1)
    rng = np.random.default_rng(0)
    assert all(ground(q.get_template("1p"), split, rng, require_hard=True) is None for _ in range(20))


def test_ground_1p_easy_answers_are_train_neighbors(small_split):
    rng = np.random.default_rng(0)
    for _ in range(50):
        g = ground(q.get_template("1p"), small_split, rng, require_hard=False)
        h, r = g.tree.child.entity, g.tree.relation
        assert g.easy_answers == set(small_split.train.neighbors(h, r))


def _hand_split():
    train = {(0, 0, 1), (0, 0, 2), (3, 1, 2)}
    test = train | {(0, 0, 5), (0, 0, 4), (3, 1, 4), (3, 1, 1)}
    return GraphSplit(*(KnowledgeGraph.from_triples(t, 6, 2) for t in (train, train, test)))


def test_ground_2in_on_hand_split():
    split = _hand_split()
    target = q.get_template("2in").bind([0, 3], [0, 1])
    # by hand: train answers {1}; test answers {1,2,4,5} - {1,2,4} = {5}
    hits = 0
    for seed in range(300):
        g = ground(q.get_template("2in"), split, np.random.default_rng(seed), require_hard=False)
        if g.tree == target:
            hits += 1
            assert g.easy_answers == set() and g.hard_answers == {5}
    assert hits > 0


@pytest.mark.parametrize("name", NAMES)
def test_grounded_answer_invariants(name, small_split):
    rng = np.random.default_rng(5)
    for _ in range(20):
        g = ground(q.get_template(name), small_split, rng, require_hard=False)
        full = evaluate(g.tree, small_split.test)
        assert not (g.easy_answers & g.hard_answers)
        assert g.easy_answers | g.hard_answers == full
        assert g.easy_answers == evaluate(g.tree, small_split.train) & full
        assert 0 < len(full) <= 0.5 * small_split.num_entities


def test_ground_is_deterministic(small_split):
    t = q.get_template("pin")
    a = [ground(t, small_split, np.random.default_rng(3), False) for _ in range(5)]
    b = [ground(t, small_split, np.random.default_rng(3), False) for _ in range(5)]
    assert a == b


def test_ground_exhaustion_names_template():
    empty = KnowledgeGraph.from_triples({(0, 0, 1)}, 4, 1)
    split = GraphSplit(empty, empty, empty)
    with pytest.raises(SamplingExhaustedError, match="2p"):
        ground(q.get_template("2p"), split, np.random.default_rng(0), False)


def test_grounded_query_rejects_overlap():
    with pytest.raises(ValidationError):
        GroundedQuery("1p", q.Projection(0, q.Anchor(0)), frozenset({1}), frozenset({1}))


def test_retained_count_arithmetic():
    assert retained_count(10000, 0.001) == 10
    assert retained_count(10001, 0.001) == 11
    assert retained_count(50, 0.001) == 1


def test_multihop_types(multihop_dataset):
    assert multihop_dataset.train_types == ["1p", "2p", "3p"]
    assert multihop_dataset.eval_types == ["1p", "2p", "3p", "4p", "5p", "6p"]


def test_retention_and_full_1p(small_split, multihop_dataset):
    assert len(multihop_dataset.train_queries["2p"]) == retained_count(200, 0.05) == 10
    pairs = {(h, r) for (h, r, _) in small_split.train.triples}
    got = {(g.tree.child.entity, g.tree.relation) for g in multihop_dataset.train_queries["1p"]}
    assert got == pairs and len(multihop_dataset.train_queries["1p"]) == len(pairs)


def test_epfo_has_no_negation(small_split):
    ds = build_fewshot_dataset(small_split, "epfo", 100, ratio=0.05, seed=1, eval_per_type=2)
    for group in (ds.train_queries, ds.eval_queries):
        for name, items in group.items():
            assert not q.get_template(name).has_negation
            assert all(not any(isinstance(n, q.Negation) for _, n in q.iter_nodes(g.tree)) for g in items)


def test_efo1_eval_only_types(efo1_dataset):
    assert not set(EVAL_ONLY) & set(efo1_dataset.train_types)
    assert set(EVAL_ONLY) <= set(efo1_dataset.eval_types)
    assert len(efo1_dataset.eval_types) == 14
    assert all(g.hard_answers for items in efo1_dataset.eval_queries.values() for g in items)


def test_dataset_bytes_are_seed_stable(small_split, tmp_path):
    for run in ("a", "b"):
        build_fewshot_dataset(small_split, "efo1", 100, ratio=0.05, seed=4, eval_per_type=3).save(tmp_path / run)
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
    assert match == files and not mismatch and not errors


def test_dataset_round_trip(efo1_dataset, tmp_path):
    efo1_dataset.save(tmp_path / "d")
    loaded = FewShotDataset.load(tmp_path / "d")
    assert loaded.train_queries == efo1_dataset.train_queries
    assert loaded.eval_queries == efo1_dataset.eval_queries
    assert loaded.setting == efo1_dataset.setting
