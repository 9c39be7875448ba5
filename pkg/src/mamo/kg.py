"""Integer-id knowledge graphs, open-world splits and a seeded synthetic generator."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

Triple = tuple[int, int, int]


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    """An immutable set of (head, relation, tail) triples with adjacency indexes.

    Construct through :meth:`from_triples`; the indexes are derived there and
    never change afterwards.
    """

    num_entities: int
    num_relations: int
    triples: frozenset[Triple]
    out_index: dict[tuple[int, int], tuple[int, ...]] = field(repr=False)
    in_index: dict[tuple[int, int], tuple[int, ...]] = field(repr=False)

    @classmethod
    def from_triples(cls, triples, num_entities=None, num_relations=None):
        triples = frozenset((int(h), int(r), int(t)) for h, r, t in triples)
        if num_entities is None:
            num_entities = 1 + max((max(h, t) for h, _, t in triples), default=-1)
        if num_relations is None:
            num_relations = 1 + max((r for _, r, _ in triples), default=-1)
        for h, r, t in triples:
            if min(h, r, t) < 0:
                raise ValidationError(f"negative id in triple {(h, r, t)}")
            if h >= num_entities or t >= num_entities:
                raise ValidationError(f"entity id in {(h, r, t)} exceeds num_entities={num_entities}")
            if r >= num_relations:
                raise ValidationError(f"relation id in {(h, r, t)} exceeds num_relations={num_relations}")

        out = defaultdict(list)
        inn = defaultdict(list)
        for h, r, t in triples:
            out[h, r].append(t)
            inn[t, r].append(h)
        out_index = {k: tuple(sorted(v)) for k, v in out.items()}
        in_index = {k: tuple(sorted(v)) for k, v in inn.items()}
        return cls(num_entities, num_relations, triples, out_index, in_index)

    def __len__(self):
        return len(self.triples)

    def __contains__(self, triple):
        return tuple(triple) in self.triples

    def __eq__(self, other):
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (
            self.num_entities == other.num_entities
            and self.num_relations == other.num_relations
            and self.triples == other.triples
        )

    def __hash__(self):
        return hash((self.num_entities, self.num_relations, self.triples))

    def check_entity(self, entity):
        if not 0 <= entity < self.num_entities:
            raise ValidationError(f"entity id {entity} out of range [0, {self.num_entities})")

    def check_relation(self, relation):
        if not 0 <= relation < self.num_relations:
            raise ValidationError(f"relation id {relation} out of range [0, {self.num_relations})")

    def neighbors(self, head, relation):
        """Sorted tails ``t`` with ``(head, relation, t)`` in the graph."""
        self.check_entity(head)
        self.check_relation(relation)
        return list(self.out_index.get((head, relation), ()))

    def predecessors(self, tail, relation):
        self.check_entity(tail)
        self.check_relation(relation)
        return list(self.in_index.get((tail, relation), ()))

    def project(self, entities, relation):
        """Set projection: all tails reachable from ``entities`` through ``relation``."""
        result = set()
        for e in entities:
            result.update(self.out_index.get((e, relation), ()))
        return result

    @cached_property
    def incoming(self):
        """``tail -> [(relation, head), ...]`` over all relations, sorted."""
        inc = defaultdict(list)
        for h, r, t in self.sorted_triples():
            inc[t].append((r, h))
        return dict(inc)

    @cached_property
    def entities_with_incoming(self):
        return np.array(sorted(self.incoming), dtype=np.int64)

    def sorted_triples(self):
        return sorted(self.triples)

    def write(self, path):
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            for h, r, t in self.sorted_triples():
                fh.write(f"{h}\t{r}\t{t}\n")


def neighbors(graph, head, relation):
    return graph.neighbors(head, relation)


def load_triples(path, counts=None):
    """Read a whitespace-separated ``head relation tail`` file.

    ``counts`` is an optional ``(num_entities, num_relations)`` pair; when it is
    absent the counts are inferred as max id + 1.
    """
    triples = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(f"expected 3 fields, got {len(parts)}", position=f"line {lineno}")
            try:
                h, r, t = (int(p) for p in parts)
            except ValueError:
                raise ParseError(f"non-integer id in {line!r}", position=f"line {lineno}") from None
            if min(h, r, t) < 0:
                raise ParseError(f"negative id in {line!r}", position=f"line {lineno}")
            triples.append((h, r, t))
    if counts is None:
        return KnowledgeGraph.from_triples(triples)
    return KnowledgeGraph.from_triples(triples, *counts)


@dataclass(frozen=True)
class GraphSplit:
    train: KnowledgeGraph
    valid: KnowledgeGraph
    test: KnowledgeGraph

    def __post_init__(self):
        graphs = (self.train, self.valid, self.test)
        if len({g.num_entities for g in graphs}) != 1 or len({g.num_relations for g in graphs}) != 1:
            raise ValidationError("train/valid/test must share entity and relation counts")
        if not (self.train.triples <= self.valid.triples <= self.test.triples):
            raise ValidationError("split edge sets must be nested: train <= valid <= test")

    @property
    def num_entities(self):
        return self.train.num_entities

    @property
    def num_relations(self):
        return self.train.num_relations

    @classmethod
    def closed(cls, graph):
        """A split with no held-out edges, used to ground training queries."""
        return cls(graph, graph, graph)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("train", "valid", "test"):
            getattr(self, name).write(directory / f"{name}.txt")
        meta = {"num_entities": self.num_entities, "num_relations": self.num_relations}
        (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        counts = (meta["num_entities"], meta["num_relations"])
        return cls(*(load_triples(directory / f"{name}.txt", counts) for name in ("train", "valid", "test")))


def _zipf_weights(order, exponent):
    # order[k] is the item holding popularity rank k
    weights = np.empty(len(order))
    weights[order] = 1.0 / np.arange(1, len(order) + 1) ** exponent
    return weights / weights.sum()


def generate_synthetic_kg(
    num_entities,
    num_relations,
    edges_per_relation,
    holdout_fraction,
    seed,
    *,
    num_clusters=None,
    zipf_exponent=1.0,
):
    """Sample a nested train/valid/test split from a latent-cluster graph model.

    Entities are partitioned into clusters and each relation maps every source
    cluster to a target cluster. Heads are drawn from a Zipf-weighted
    distribution over a relation-specific popularity order; tails are drawn,
    again Zipf-weighted, from the target cluster of the head's cluster.
    ``holdout_fraction`` of each relation's edges is removed from train, and
    half of the removed edges are put back for valid.
    """
    if num_entities < 2:
        raise ValidationError("num_entities must be >= 2")
    if edges_per_relation < 1:
        raise ValidationError("edges_per_relation must be >= 1")
    if not 0.0 <= holdout_fraction <= 1.0:
        raise ValidationError("holdout_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    if num_clusters is None:
        num_clusters = max(1, num_entities // 50)
    num_clusters = min(num_clusters, num_entities)

    cluster_of = np.empty(num_entities, dtype=np.int64)
    cluster_of[rng.permutation(num_entities)] = np.arange(num_entities) % num_clusters
    members = [np.flatnonzero(cluster_of == c) for c in range(num_clusters)]

    train, valid, test = set(), set(), set()
    for r in range(num_relations):
        head_p = _zipf_weights(rng.permutation(num_entities), zipf_exponent)
        target = rng.integers(num_clusters, size=num_clusters)
        tail_p = [_zipf_weights(rng.permutation(len(m)), zipf_exponent) for m in members]

        edges = set()
        # Zipf-heavy heads saturate quickly; cap the number of draws.
        for _ in range(50):
            need = edges_per_relation - len(edges)
            if need <= 0:
                break
            heads = rng.choice(num_entities, size=2 * need, p=head_p)
            for h in heads:
                c = target[cluster_of[h]]
                t = members[c][rng.choice(len(members[c]), p=tail_p[c])]
                if t == h:
                    continue
                edges.add((int(h), r, int(t)))
                if len(edges) == edges_per_relation:
                    break

        ordered = sorted(edges)
        n_hold = int(round(holdout_fraction * len(ordered)))
        held = rng.choice(len(ordered), size=n_hold, replace=False) if n_hold else np.array([], dtype=np.int64)
        held_set = set(held.tolist())
        back_to_valid = set(held[: n_hold // 2].tolist())
        for i, e in enumerate(ordered):
            test.add(e)
            if i not in held_set:
                train.add(e)
                valid.add(e)
            elif i in back_to_valid:
                valid.add(e)

    make = lambda ts: KnowledgeGraph.from_triples(ts, num_entities, num_relations)  # noqa: E731
    return GraphSplit(make(train), make(valid), make(test))
