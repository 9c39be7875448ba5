"""Exact set semantics for query trees, template grounding and few-shot dataset construction."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import query as q
from .errors import SamplingExhaustedError, ValidationError
from .kg import GraphSplit

MAX_ATTEMPTS = 1000


def evaluate(tree, graph):
    """The answer set of a grounded ``tree`` on ``graph``, computed bottom-up."""
    if isinstance(tree, q.Anchor):
        graph.check_entity(tree.entity)
        return {tree.entity}
    if isinstance(tree, q.Projection):
        graph.check_relation(tree.relation)
        return graph.project(evaluate(tree.child, graph), tree.relation)
    if isinstance(tree, q.Intersection):
        sets = [evaluate(c, graph) for c in tree.children]
        return set.intersection(*sets)
    if isinstance(tree, q.Union):
        return set().union(*(evaluate(c, graph) for c in tree.children))
    if isinstance(tree, q.Negation):
        return set(range(graph.num_entities)) - evaluate(tree.child, graph)
    raise TypeError(f"not a query tree: {tree!r}")


@dataclass(frozen=True)
class GroundedQuery:
    template_name: str
    tree: q.QueryTree
    easy_answers: frozenset = field(default_factory=frozenset)
    hard_answers: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.easy_answers & self.hard_answers:
            raise ValidationError("easy and hard answer sets overlap")

    @property
    def answers(self):
        return self.easy_answers | self.hard_answers

    def to_json(self):
        return json.dumps(
            {"tree": q.serialize(self.tree), "easy": sorted(self.easy_answers), "hard": sorted(self.hard_answers)},
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line, template_name):
        rec = json.loads(line)
        return cls(template_name, q.parse_tree(rec["tree"]), frozenset(rec["easy"]), frozenset(rec["hard"]))


# --------------------------------------------------------------------------
# grounding


def _walk_index(graph):
    return graph.incoming, graph.entities_with_incoming


def _backward_walk(template, graph, rng, answer):
    """Bind placeholders by walking from ``answer`` toward the anchors; None on a dead end."""
    incoming, targets = _walk_index(graph)
    n_anchor, n_rel = template.placeholder_count
    anchors = [None] * n_anchor
    relations = [None] * n_rel

    def walk(node, target):
        if isinstance(node, q.Anchor):
            anchors[node.entity] = target
            return True
        if isinstance(node, q.Projection):
            edges = incoming.get(target)
            if not edges:
                return False
            r, h = edges[rng.integers(len(edges))]
            relations[node.relation] = r
            return walk(node.child, h)
        if isinstance(node, (q.Intersection, q.Union)):
            return all(walk(c, target) for c in node.children)
        # negated branch: an independent positive walk, complemented by evaluation
        return walk(node.child, int(targets[rng.integers(len(targets))]))

    if not walk(template.tree, answer):
        return None
    return template.bind(anchors, relations)


def ground(template, split, rng, require_hard, *, max_answer_fraction=0.5, max_attempts=MAX_ATTEMPTS):
    """Sample one grounding of ``template`` with a nonempty answer set on ``split.test``.

    Easy answers are those also derivable on ``split.train``; hard answers are
    the rest. With ``require_hard`` a grounding that has no hard answer gives
    ``None``. Groundings answering more than ``max_answer_fraction`` of all
    entities are rejected as degenerate.
    """
    test = split.test
    _, targets = _walk_index(test)
    if len(targets) == 0:
        raise SamplingExhaustedError(template.name, 0)
    limit = max_answer_fraction * test.num_entities
    for _ in range(max_attempts):
        answer = int(targets[rng.integers(len(targets))])
        tree = _backward_walk(template, test, rng, answer)
        if tree is None:
            continue
        answers = evaluate(tree, test)
        if not answers or len(answers) > limit:
            continue
        easy = evaluate(tree, split.train) & answers if split.train is not test else answers
        hard = answers - easy
        if require_hard and not hard:
            return None
        return GroundedQuery(template.name, tree, frozenset(easy), frozenset(hard))
    raise SamplingExhaustedError(template.name, max_attempts)


# --------------------------------------------------------------------------
# few-shot datasets


class Setting(str, Enum):
    MULTIHOP = "multihop"
    EPFO = "epfo"
    EFO1 = "efo1"


_EPFO_EVAL = ["1p", "2p", "3p", "2i", "3i", "ip", "pi", "2u", "up"]
_EFO1_EVAL = ["1p", "2p", "3p", "2i", "3i", "ip", "pi", "2in", "3in", "inp", "pin", "pni", "2u", "up"]
EVAL_ONLY = ("ip", "pi", "2u", "up")

SETTING_TEMPLATES = {
    Setting.MULTIHOP: (["1p", "2p", "3p"], ["1p", "2p", "3p", "4p", "5p", "6p"]),
    Setting.EPFO: ([t for t in _EPFO_EVAL if t not in EVAL_ONLY], _EPFO_EVAL),
    Setting.EFO1: ([t for t in _EFO1_EVAL if t not in EVAL_ONLY], _EFO1_EVAL),
}


def setting_templates(setting):
    """``(train_names, eval_names)`` for a setting, eval names in table-column order."""
    train, evaluation = SETTING_TEMPLATES[Setting(setting)]
    return list(train), list(evaluation)


def retained_count(pool_size, ratio):
    # round first so that e.g. 0.001 * 10000 does not ceil to 11
    return max(1, math.ceil(round(ratio * pool_size, 9)))


def template_rng(seed, role, name):
    return np.random.default_rng([int(seed), zlib.crc32(role.encode()), zlib.crc32(name.encode())])


@dataclass
class FewShotDataset:
    setting: Setting
    train_queries: dict
    eval_queries: dict
    retention_ratio: float = 0.001
    num_entities: int | None = None
    num_relations: int | None = None

    def __post_init__(self):
        self.setting = Setting(self.setting)
        self._pool = None

    @property
    def train_types(self):
        return list(self.train_queries)

    @property
    def eval_types(self):
        return list(self.eval_queries)

    def all_train(self):
        """Every training query, types in declaration order (cached)."""
        if self._pool is None:
            self._pool = [g for name in self.train_queries for g in self.train_queries[name]]
        return self._pool

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "setting": self.setting.value,
            "retention_ratio": self.retention_ratio,
            "train_types": self.train_types,
            "eval_types": self.eval_types,
            "num_entities": self.num_entities,
            "num_relations": self.num_relations,
        }
        (directory / "dataset.json").write_text(json.dumps(meta, indent=2) + "\n")
        for role, queries in (("train", self.train_queries), ("eval", self.eval_queries)):
            for name, items in queries.items():
                with (directory / f"{role}-{name}.jsonl").open("w", encoding="utf-8") as fh:
                    for g in items:
                        fh.write(g.to_json() + "\n")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = json.loads((directory / "dataset.json").read_text())

        def read(role, name):
            with (directory / f"{role}-{name}.jsonl").open(encoding="utf-8") as fh:
                return [GroundedQuery.from_json(line, name) for line in fh if line.strip()]

        return cls(
            Setting(meta["setting"]),
            {n: read("train", n) for n in meta["train_types"]},
            {n: read("eval", n) for n in meta["eval_types"]},
            meta["retention_ratio"],
            meta.get("num_entities"),
            meta.get("num_relations"),
        )


def one_hop_queries(graph):
    """One training query per observed ``(head, relation)`` pair."""
    queries = []
    for (h, r), tails in sorted(graph.out_index.items()):
        tree = q.Projection(r, q.Anchor(h))
        queries.append(GroundedQuery("1p", tree, frozenset(tails)))
    return queries


def build_fewshot_dataset(
    split,
    setting,
    pool_size_per_type,
    ratio=0.001,
    seed=0,
    *,
    eval_per_type=100,
    max_answer_fraction=0.5,
):
    """Few-shot training queries plus hard-answer evaluation queries for a setting.

    Every non-1p training type is a uniform subset of ``ceil(ratio * pool)``
    queries taken from a pool grounded on the train graph. 1p keeps every
    observed ``(head, relation)`` pair.
    """
    setting = Setting(setting)
    train_names, eval_names = setting_templates(setting)
    closed = GraphSplit.closed(split.train)

    train_queries = {}
    for name in train_names:
        if name == "1p":
            train_queries[name] = one_hop_queries(split.train)
            continue
        template = q.get_template(name)
        rng = template_rng(seed, "train", name)
        pool = [
            ground(template, closed, rng, require_hard=False, max_answer_fraction=max_answer_fraction)
            for _ in range(pool_size_per_type)
        ]
        keep = np.sort(rng.choice(len(pool), size=min(len(pool), retained_count(len(pool), ratio)), replace=False))
        train_queries[name] = [pool[i] for i in keep]

    eval_queries = {}
    for name in eval_names:
        template = q.get_template(name)
        rng = template_rng(seed, "eval", name)
        items, misses = [], 0
        while len(items) < eval_per_type:
            g = ground(template, split, rng, require_hard=True, max_answer_fraction=max_answer_fraction)
            if g is None:
                misses += 1
                if misses >= MAX_ATTEMPTS:
                    raise SamplingExhaustedError(name, misses)
                continue
            misses = 0
            items.append(g)
        eval_queries[name] = items

    return FewShotDataset(setting, train_queries, eval_queries, ratio, split.num_entities, split.num_relations)
