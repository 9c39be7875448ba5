"""Bounded fuzzy-vector query embeddings with per-operator-type projection overlays.

Entities and query sets live in ``[0, 1]^d``. Intersection is the
componentwise minimum, negation is ``1 - x`` and projection is a
per-relation two-layer network with a sigmoid output. Every projection site
of a query can be routed to an adapted copy of the projection parameters
(an *overlay*) keyed by its operator type.
"""

from __future__ import annotations

import dataclasses
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import query as q

DTYPE = torch.float64
PROJECTION_KEYS = ("w1", "b1", "w2", "b2")
FORMAT_VERSION = 1


@dataclass
class ParameterStore:
    """Entity table (part of phi), shared projection parameters theta and overlays."""

    entity: torch.Tensor
    projection: dict
    adapted: dict = field(default_factory=dict)
    depth_cap: int = q.DEFAULT_DEPTH_CAP

    @property
    def num_entities(self):
        return self.entity.shape[0]

    @property
    def num_relations(self):
        return self.projection["w1"].shape[0]

    @property
    def dim(self):
        return self.entity.shape[1]

    @property
    def hidden(self):
        return self.projection["w1"].shape[1]

    def theta(self):
        return dict(self.projection)

    def phi(self):
        return {"entity": self.entity}

    def parameters(self):
        """Named trainable tensors: ``entity`` plus ``theta.<name>``."""
        named = {"entity": self.entity}
        named.update({f"theta.{k}": v for k, v in self.projection.items()})
        return named

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def params_for(self, key):
        if key is not None and key in self.adapted:
            return self.adapted[key]
        return self.projection

    def detached(self):
        """A read-only snapshot that shares no autograd history."""
        return ParameterStore(
            self.entity.detach().clone(),
            {k: v.detach().clone() for k, v in self.projection.items()},
            {key: {k: v.detach().clone() for k, v in ov.items()} for key, ov in self.adapted.items()},
            self.depth_cap,
        )


def init_store(num_entities, num_relations, dim=32, hidden=None, seed=0, depth_cap=q.DEFAULT_DEPTH_CAP):
    """Uniform ``[-0.5, 0.5]`` pre-squash initialization, seeded."""
    hidden = dim if hidden is None else hidden
    gen = torch.Generator().manual_seed(int(seed))

    def uniform(*shape):
        return (torch.rand(*shape, generator=gen, dtype=DTYPE) - 0.5).requires_grad_()

    entity = uniform(num_entities, dim)
    projection = {
        "w1": uniform(num_relations, hidden, dim),
        "b1": uniform(num_relations, hidden),
        "w2": uniform(num_relations, dim, hidden),
        "b2": uniform(num_relations, dim),
    }
    return ParameterStore(entity, projection, {}, depth_cap)


def squash(x):
    return torch.sigmoid(x)


def project(x, relations, params):
    """Apply each row's relation transform to a batch of set embeddings ``x``."""
    w1 = params["w1"][relations]
    w2 = params["w2"][relations]
    hidden = torch.tanh(torch.einsum("bhd,bd->bh", w1, x) + params["b1"][relations])
    return squash(torch.einsum("bdh,bh->bd", w2, hidden) + params["b2"][relations])


def embed_branches(trees, store, scheme=None):
    """Embed same-shape, union-free trees as a ``(batch, d)`` tensor.

    With a ``scheme``, each projection site uses the overlay stored for its
    operator-type key when one exists, and theta otherwise.
    """
    keys = q.site_keys(trees[0], scheme, store.depth_cap) if scheme is not None else None
    return _embed(trees, (), store, keys)


def _embed(nodes, path, store, keys):
    head = nodes[0]
    if isinstance(head, q.Anchor):
        idx = torch.tensor([n.entity for n in nodes])
        return squash(store.entity[idx])
    if isinstance(head, q.Projection):
        x = _embed([n.child for n in nodes], path + (0,), store, keys)
        relations = torch.tensor([n.relation for n in nodes])
        params = store.params_for(keys[path] if keys is not None else None)
        return project(x, relations, params)
    if isinstance(head, q.Intersection):
        parts = [_embed([n.children[i] for n in nodes], path + (i,), store, keys) for i in range(len(head.children))]
        return torch.stack(parts).amin(dim=0)
    if isinstance(head, q.Negation):
        return 1.0 - _embed([n.child for n in nodes], path + (0,), store, keys)
    if isinstance(head, q.Union):
        raise TypeError("union nodes must be removed with dnf_decompose before embedding")
    raise TypeError(f"not a query tree: {head!r}")


def forward(tree, store, scheme=None):
    """Embedding of one union-free tree, a ``(d,)`` tensor in ``[0, 1]^d``."""
    return embed_branches([tree], store, scheme)[0]


def embed_queries(trees, store, scheme=None):
    """Embed arbitrary (possibly union) trees as a ``(batch, branches, d)`` tensor.

    Queries with fewer DNF branches than the widest one repeat their last
    branch, which leaves any max over branches unchanged.
    """
    groups = defaultdict(list)
    branches = []
    for i, tree in enumerate(trees):
        branches.append(q.dnf_decompose(tree))
        groups[q.shape(tree)].append(i)
    widest = max(len(b) for b in branches)
    chunks, order = [], []
    for members in groups.values():
        nb = len(branches[members[0]])
        per_branch = [embed_branches([branches[i][b] for i in members], store, scheme) for b in range(nb)]
        per_branch += [per_branch[-1]] * (widest - nb)
        chunks.append(torch.stack(per_branch, dim=1))
        order.extend(members)
    stacked = torch.cat(chunks) if len(chunks) > 1 else chunks[0]
    if order == sorted(order):
        return stacked
    return stacked[torch.from_numpy(np.argsort(order))]


def distance(query_emb, entity_emb):
    return (query_emb - entity_emb).abs().sum(dim=-1)


def score(query_emb, entity, store):
    """``-L1(query, squash(entity row))``; higher is more plausible."""
    return -distance(query_emb, squash(store.entity[entity]))


def score_all(trees, store, scheme=None):
    """``(len(trees), num_entities)`` numpy scores, max over DNF branches."""
    with torch.no_grad():
        ents = squash(store.entity)
        embs = embed_queries(trees, store, scheme)
        d = torch.cdist(embs, ents.expand(embs.shape[0], *ents.shape), p=1)
        return (-d.amin(dim=1)).numpy()


def sample_targets(batch, num_entities, negatives, rng):
    """One uniform positive and ``negatives`` uniform entities per query, drawn in batch order."""
    pos = np.empty(len(batch), dtype=np.int64)
    neg = np.empty((len(batch), negatives), dtype=np.int64)
    for i, g in enumerate(batch):
        answers = sorted(g.answers)
        if not answers:
            raise ValueError(f"training query {q.serialize(g.tree)} has no positive answer")
        pos[i] = answers[rng.integers(len(answers))]
        neg[i] = rng.integers(num_entities, size=negatives)
    return pos, neg


def query_losses(batch, store, scheme, negatives_per_query=32, margin=2.0, rng=None, targets=None):
    """Per-query negative-sampling losses, a ``(len(batch),)`` tensor."""
    if targets is None:
        targets = sample_targets(batch, store.num_entities, negatives_per_query, rng)
    pos, neg = targets
    cand = torch.from_numpy(np.concatenate([pos[:, None], neg], axis=1))
    embs = embed_queries([g.tree for g in batch], store, scheme)
    ents = squash(store.entity[cand])
    scores = (-distance(embs[:, :, None, :], ents[:, None, :, :])).amax(dim=1)
    pos_term = -F.logsigmoid(margin + scores[:, 0])
    neg_term = -F.logsigmoid(-scores[:, 1:] - margin).mean(dim=1)
    return pos_term + neg_term


def loss(batch, store, scheme=None, negatives_per_query=32, margin=2.0, rng=None, targets=None):
    """Mean over ``batch`` of ``-log s(margin + s_pos) - mean_k log s(-s_neg - margin)``."""
    return query_losses(batch, store, scheme, negatives_per_query, margin, rng, targets).mean()


def grad(value, wrt, create_graph=False, retain_graph=None):
    """Reverse-mode derivatives of a scalar ``value`` w.r.t. a dict of tensors.

    Tensors that did not take part in computing ``value`` get a zero gradient.
    """
    names = list(wrt)
    tensors = [wrt[n] for n in names]
    if not value.requires_grad:
        return {n: torch.zeros_like(t) for n, t in zip(names, tensors)}
    grads = torch.autograd.grad(
        value, tensors, allow_unused=True, create_graph=create_graph, retain_graph=retain_graph
    )
    return {n: (torch.zeros_like(t) if g is None else g) for n, t, g in zip(names, tensors, grads)}


def overlay_slots(store, keys):
    """Fresh overlay leaves equal to theta, one per key, for differentiating at overlay = theta."""
    return {key: {k: v.detach().clone().requires_grad_() for k, v in store.projection.items()} for key in keys}


def partition_gradients(batch, store, scheme, negatives_per_query=32, margin=2.0, rng=None, targets=None):
    """Shared-theta gradient and the per-category overlay gradients of one loss.

    Returns ``(shared, per_key)`` where ``shared`` maps projection names to
    the gradient w.r.t. theta with no overlays and ``per_key`` maps every
    category of ``scheme`` to the gradient w.r.t. its overlay evaluated at
    overlay = theta. Both use the same sampled targets.
    """
    if targets is None:
        targets = sample_targets(batch, store.num_entities, negatives_per_query, rng)
    theta = {k: v.detach().clone().requires_grad_() for k, v in store.projection.items()}
    shared_store = store.replace(projection=theta, adapted={})
    shared = grad(loss(batch, shared_store, None, negatives_per_query, margin, targets=targets), theta)

    keys = q.scheme_categories(scheme, store.depth_cap)
    slots = overlay_slots(store, keys)
    split_store = store.replace(projection=theta, adapted=slots)
    value = loss(batch, split_store, scheme, negatives_per_query, margin, targets=targets)
    flat = {(key, k): t for key, ov in slots.items() for k, t in ov.items()}
    g = grad(value, flat)
    per_key = {key: {k: g[key, k] for k in PROJECTION_KEYS} for key in keys}
    return shared, per_key


# --------------------------------------------------------------------------
# checkpoints


def _key_to_json(key):
    return [key.scheme, key.category]


def _key_from_json(item):
    scheme, category = item
    return q.OperatorTypeKey(scheme, category)


def save_checkpoint(path, store, *, meta=None, optimizer_state=None):
    payload = {
        "format_version": FORMAT_VERSION,
        "num_entities": store.num_entities,
        "num_relations": store.num_relations,
        "dim": store.dim,
        "hidden": store.hidden,
        "depth_cap": store.depth_cap,
        "entity": store.entity.detach().clone(),
        "projection": {k: v.detach().clone() for k, v in store.projection.items()},
        "adapted": [
            (_key_to_json(key), {k: v.detach().clone() for k, v in ov.items()})
            for key, ov in sorted(store.adapted.items())
        ],
        "meta": meta or {},
        "optimizer": optimizer_state,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path):
    """Returns ``(store, meta, optimizer_state)``; loaded tensors are trainable leaves."""
    payload = torch.load(Path(path), weights_only=False)
    if payload.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {payload.get('format_version')!r}")
    store = ParameterStore(
        payload["entity"].requires_grad_(),
        {k: v.requires_grad_() for k, v in payload["projection"].items()},
        {_key_from_json(k): ov for k, ov in payload["adapted"]},
        payload["depth_cap"],
    )
    return store, payload["meta"], payload["optimizer"]
