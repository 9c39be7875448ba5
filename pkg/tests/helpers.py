"""Independent oracles shared by the test modules."""

import numpy as np

from mamo import query as q
from mamo.kg import KnowledgeGraph


def random_graph(rng, num_entities, num_relations, num_triples):
    triples = {
        (int(rng.integers(num_entities)), int(rng.integers(num_relations)), int(rng.integers(num_entities)))
        for _ in range(num_triples)
    }
    return KnowledgeGraph.from_triples(triples, num_entities, num_relations)


def brute_force_answers(tree, graph):
    """Answer set by enumerating every assignment of each existential variable.

    ``holds(node, v)`` is the formula "v belongs to node's set"; a projection
    introduces a fresh variable ``u`` ranging over all entities and checks the
    triple ``(u, r, v)`` directly against the raw triple set.
    """
    triples = graph.triples
    entities = range(graph.num_entities)

    def holds(node, v):
        if isinstance(node, q.Anchor):
            return v == node.entity
        if isinstance(node, q.Projection):
            return any((u, node.relation, v) in triples and holds(node.child, u) for u in entities)
        if isinstance(node, q.Intersection):
            return all(holds(c, v) for c in node.children)
        if isinstance(node, q.Union):
            return any(holds(c, v) for c in node.children)
        if isinstance(node, q.Negation):
            return not holds(node.child, v)
        raise TypeError(node)

    return {v for v in entities if holds(tree, v)}


def random_grounding(template, graph, rng):
    n_anchor, n_rel = template.placeholder_count
    anchors = rng.integers(graph.num_entities, size=n_anchor)
    relations = rng.integers(graph.num_relations, size=n_rel)
    return template.bind(anchors, relations)


def sorted_scores_ranks(scores, easy, hard):
    """Filtered pessimistic ranks by explicit sorting: an independent implementation."""
    answers = set(easy) | set(hard)
    ranks = []
    for a in sorted(hard):
        pool = [(e, s) for e, s in enumerate(scores) if e == a or e not in answers]
        # pessimistic: among equal scores the answer goes last
        pool.sort(key=lambda es: (-es[1], es[0] == a))
        ranks.append(1 + [e for e, _ in pool].index(a))
    return ranks
