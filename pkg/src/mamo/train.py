"""Vanilla, query-type MAML and meta-operator (MAMO) training, plus test-time adaptation."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch

from . import backbone as bb
from . import query as q
from .errors import ConfigError, NumericError

log = logging.getLogger(__name__)


class Algorithm(str, Enum):
    VANILLA = "vanilla"
    MAML = "maml"
    MAMO = "mamo"


@dataclass
class TrainConfig:
    algorithm: Algorithm = Algorithm.VANILLA
    scheme: str | None = None
    support_batch: int = 32
    target_batch: int = 32
    adaptation_lr: float = 0.016
    outer_lr: float = 0.01
    second_order: bool = False
    steps: int = 2000
    seed: int = 0
    inference_support: int = 10
    inference_steps: int = 5
    inference_lr: float | None = None
    negatives: int = 32
    margin: float = 2.0
    dim: int = 32
    hidden: int | None = None
    depth_cap: int = q.DEFAULT_DEPTH_CAP
    checkpoint_every: int = 500

    def __post_init__(self):
        self.algorithm = Algorithm(self.algorithm)
        if self.scheme is not None:
            self.scheme = q.Scheme(self.scheme).value
        if self.algorithm is Algorithm.MAMO and self.scheme is None:
            raise ConfigError("MAMO training needs a categorization scheme")
        if self.algorithm is not Algorithm.VANILLA and self.adaptation_lr < 0:
            raise ConfigError("adaptation_lr must be non-negative")

    @property
    def fine_tune_lr(self):
        return self.adaptation_lr / 4 if self.inference_lr is None else self.inference_lr

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["algorithm"] = self.algorithm.value
        return d

    @classmethod
    def from_dict(cls, data):
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - fields
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)


def step_rng(seed, step):
    """Independent stream for one training step; makes resumed runs exact."""
    return np.random.default_rng([int(seed), int(step)])


def streams(rng):
    """``(target, support, task)`` child streams of a step generator."""
    return rng.spawn(3)


def sample_batch(queries, size, rng):
    replace = len(queries) < size
    idx = rng.choice(len(queries), size=size, replace=replace)
    return [queries[i] for i in idx]


def make_optimizer(store, lr):
    return torch.optim.Adam(list(store.parameters().values()), lr=lr)


def _apply(optimizer, value):
    if not torch.isfinite(value):
        raise NumericError(f"non-finite loss {value.item()}")
    optimizer.zero_grad(set_to_none=True)
    value.backward()
    optimizer.step()


def _grad_norm(g):
    return math.sqrt(sum(float((t.detach() ** 2).sum()) for t in g.values()))


def vanilla_step(dataset, store, optimizer, config, rng):
    """One Adam step on a uniformly sampled batch with theta shared at every site."""
    target_rng, _, _ = streams(rng)
    batch = sample_batch(dataset.all_train(), config.target_batch, target_rng)
    value = bb.loss(batch, store, None, config.negatives, config.margin, target_rng)
    _apply(optimizer, value)
    return store, value.item(), {}


def support_categories(batch, scheme, depth_cap):
    """``key -> queries containing at least one site of that key``, keys sorted."""
    members = {}
    for g in batch:
        for key in q.query_categories(g.tree, scheme, depth_cap):
            members.setdefault(key, []).append(g)
    return {key: members[key] for key in sorted(members)}


def adapt_operator(store, support, key, alpha, *, scheme=None, negatives=32, margin=2.0, rng=None,
                   second_order=False, info=None):
    """One inner step ``theta - alpha * grad`` for the overlay of ``key``.

    The gradient is taken w.r.t. the overlay slot of ``key`` at overlay =
    theta, with every other site on theta. With ``second_order`` the returned
    overlay stays differentiable through the inner gradient; otherwise the
    gradient is a constant and d(overlay)/d(theta) is the identity.
    """
    theta = store.projection
    if not support:
        return dict(theta)
    scheme = scheme or key.scheme
    slot = {k: v.clone() if second_order else v.detach().clone().requires_grad_() for k, v in theta.items()}
    inner = store.replace(adapted={key: slot})
    value = bb.loss(support, inner, scheme, negatives, margin, rng)
    g = bb.grad(value, slot, create_graph=second_order)
    if info is not None:
        info[str(key)] = _grad_norm(g)
    return {k: theta[k] - alpha * g[k] for k in theta}


def mamo_step(dataset, store, optimizer, config, rng):
    """Adapt theta per operator type on a support batch, then update from the target loss."""
    if config.scheme is None:
        raise ConfigError("mamo_step needs config.scheme")
    target_rng, support_rng, _ = streams(rng)
    pool = dataset.all_train()
    support = sample_batch(pool, config.support_batch, support_rng)
    groups = support_categories(support, config.scheme, store.depth_cap)
    inner_rngs = support_rng.spawn(len(groups)) if groups else []
    norms = {}
    overlays = {}
    for (key, members), key_rng in zip(groups.items(), inner_rngs):
        overlays[key] = adapt_operator(
            store, members, key, config.adaptation_lr, scheme=config.scheme, negatives=config.negatives,
            margin=config.margin, rng=key_rng, second_order=config.second_order, info=norms,
        )
    target = sample_batch(pool, config.target_batch, target_rng)
    outer = store.replace(adapted=overlays)
    value = bb.loss(target, outer, config.scheme, config.negatives, config.margin, target_rng)
    _apply(optimizer, value)
    store.adapted = {}
    return store, value.item(), {"inner_grad_norms": norms}


def maml_step(dataset, store, optimizer, config, rng):
    """Query-type-level MAML: adapt every parameter on one sampled type, update from its target loss."""
    target_rng, support_rng, task_rng = streams(rng)
    names = dataset.train_types
    name = names[task_rng.integers(len(names))]
    pool = dataset.train_queries[name]
    support = sample_batch(pool, config.support_batch, support_rng)
    adapted = adapt_all(store, support, config.adaptation_lr, negatives=config.negatives, margin=config.margin,
                        rng=support_rng, second_order=config.second_order)
    target = sample_batch(pool, config.target_batch, target_rng)
    value = bb.loss(target, adapted, None, config.negatives, config.margin, target_rng)
    _apply(optimizer, value)
    return store, value.item(), {"task": name}


def adapt_all(store, support, alpha, *, negatives=32, margin=2.0, rng=None, second_order=False):
    """A store whose entity table and theta took one gradient step on ``support``."""
    params = store.parameters()
    slots = {n: v.clone() if second_order else v.detach().clone().requires_grad_() for n, v in params.items()}
    value = bb.loss(support, _from_named(store, slots), None, negatives, margin, rng)
    g = bb.grad(value, slots, create_graph=second_order)
    return _from_named(store, {n: params[n] - alpha * g[n] for n in params})


def _from_named(store, named):
    projection = {k: named[f"theta.{k}"] for k in bb.PROJECTION_KEYS}
    return store.replace(entity=named["entity"], projection=projection, adapted={})


STEP_FUNCTIONS = {Algorithm.VANILLA: vanilla_step, Algorithm.MAML: maml_step, Algorithm.MAMO: mamo_step}


def check_dataset(dataset, config):
    if not dataset.all_train():
        raise ConfigError("the training set is empty")
    if config.algorithm is Algorithm.MAMO:
        present = support_categories(dataset.all_train(), config.scheme, config.depth_cap)
        if not present:
            raise ConfigError(f"no training query contains a site of scheme {config.scheme}")


def train(dataset, config, store=None, optimizer=None, *, start_step=0, log_file=None, on_checkpoint=None):
    """Run ``config.steps`` steps of the configured algorithm.

    ``on_checkpoint(step, store, optimizer)`` is called every
    ``config.checkpoint_every`` steps and after the last one. Each step draws
    from ``step_rng(config.seed, step)``, so a run resumed from a checkpoint
    follows the same trajectory as an uninterrupted one.
    """
    check_dataset(dataset, config)
    if store is None:
        if dataset.num_entities is None or dataset.num_relations is None:
            raise ConfigError("dataset does not declare its entity/relation counts; pass an initialized store")
        store = bb.init_store(
            dataset.num_entities, dataset.num_relations, config.dim, config.hidden, config.seed, config.depth_cap
        )
    if optimizer is None:
        optimizer = make_optimizer(store, config.outer_lr)
    step_fn = STEP_FUNCTIONS[config.algorithm]
    for step in range(start_step, config.steps):
        store, value, info = step_fn(dataset, store, optimizer, config, step_rng(config.seed, step))
        if log_file is not None:
            record = {"step": step, "algorithm": config.algorithm.value, "outer_loss": value}
            record.update(info)
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
        done = step + 1
        if on_checkpoint is not None and (done % config.checkpoint_every == 0 or done == config.steps):
            on_checkpoint(done, store, optimizer)
    return store, optimizer


# --------------------------------------------------------------------------
# test-time adaptation


def inference_adapt(store, train_dataset, scheme, config, rng, history=None):
    """Fine-tune one overlay per training-present operator type, theta frozen.

    Each overlay starts at theta and takes ``config.inference_steps`` steps of
    size ``config.fine_tune_lr`` on ``config.inference_support`` training
    queries containing that type. The returned store carries the frozen
    overlays; ``store`` itself is not modified.
    """
    base = store.detached()
    base.adapted = {}
    groups = support_categories(train_dataset.all_train(), scheme, base.depth_cap)
    overlays = {}
    keys = q.scheme_categories(scheme, base.depth_cap)
    for key, key_rng in zip(keys, rng.spawn(len(keys))):
        candidates = groups.get(key, [])
        if not candidates:
            log.info("no training support for %s; evaluating it with theta", key)
            continue
        support = sample_batch(candidates, config.inference_support, key_rng)
        overlay = {k: v.clone() for k, v in base.projection.items()}
        for _ in range(config.inference_steps):
            slot = {k: v.detach().requires_grad_() for k, v in overlay.items()}
            value = bb.loss(support, base.replace(adapted={key: slot}), scheme, config.negatives, config.margin, key_rng)
            g = bb.grad(value, slot)
            if history is not None:
                history.append({"key": str(key), "grad_norm": _grad_norm(g)})
            overlay = {k: (slot[k] - config.fine_tune_lr * g[k]).detach() for k in slot}
        overlays[key] = overlay
    return base.replace(adapted=overlays)


def _signature(name):
    tree = q.get_template(name).tree
    sites = q.enumerate_projection_sites(tree)
    kinds = {type(n) for _, n in q.iter_nodes(tree)}
    return np.array([
        len(sites),
        q.get_template(name).placeholder_count[0],
        max(s.root_distance for s in sites),
        2 * (q.Intersection in kinds),
        2 * (q.Negation in kinds),
        q.Union in kinds,
    ])


def nearest_training_template(name, train_names):
    """The training type structurally closest to ``name`` (itself when it was trained on)."""
    if name in train_names:
        return name
    target = _signature(name)
    dists = [np.abs(_signature(t) - target).sum() for t in train_names]
    return train_names[int(np.argmin(dists))]


def maml_inference_adapt(store, train_dataset, eval_names, config, rng, history=None):
    """Per evaluation type, a copy of all parameters fine-tuned on training support.

    Unseen evaluation types draw support from the nearest training type.
    Returns ``{template_name: store}``.
    """
    base = store.detached()
    base.adapted = {}
    stores = {}
    for name, name_rng in zip(eval_names, rng.spawn(len(eval_names))):
        source = nearest_training_template(name, train_dataset.train_types)
        if source != name:
            log.info("MAML support for unseen type %s drawn from %s", name, source)
        support = sample_batch(train_dataset.train_queries[source], config.inference_support, name_rng)
        adapted = base
        for _ in range(config.inference_steps):
            slots = {n: v.detach().requires_grad_() for n, v in adapted.parameters().items()}
            value = bb.loss(support, _from_named(base, slots), None, config.negatives, config.margin, name_rng)
            g = bb.grad(value, slots)
            if history is not None:
                history.append({"template": name, "source": source, "grad_norm": _grad_norm(g)})
            adapted = _from_named(base, {n: (slots[n] - config.fine_tune_lr * g[n]).detach() for n in slots})
        stores[name] = adapted
    return stores
