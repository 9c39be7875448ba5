"""Filtered ranking, per-type MRR and result tables."""

from __future__ import annotations

import csv
import io
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb


@dataclass(frozen=True)
class RankRecord:
    query: object
    answers: tuple
    ranks: tuple

    def __post_init__(self):
        if any(r < 1 for r in self.ranks):
            raise ValueError("ranks start at 1")

    @property
    def reciprocal_ranks(self):
        return tuple(1.0 / r for r in self.ranks)


def ranks_from_scores(scores, easy, hard):
    """Filtered, pessimistic ranks of each hard answer under ``scores``.

    Other answers (easy or hard) are removed from the competition; a
    non-answer whose score ties the hard answer counts as ranked above it.
    """
    if not hard:
        raise ValueError("filtered ranking needs at least one hard answer")
    scores = np.asarray(scores)
    answers = np.fromiter(set(easy) | set(hard), dtype=np.int64)
    mask = np.ones(len(scores), dtype=bool)
    mask[answers] = False
    others = np.sort(scores[mask])
    hard = sorted(hard)
    beaten_by = len(others) - np.searchsorted(others, scores[hard], side="left")
    return tuple(hard), tuple(int(b) + 1 for b in beaten_by)


def filtered_ranks(query, store, scheme=None, scores=None):
    """RankRecord for one evaluation query (max over DNF branches for unions)."""
    if scores is None:
        scores = bb.score_all([query.tree], store, scheme)[0]
    answers, ranks = ranks_from_scores(scores, query.easy_answers, query.hard_answers)
    return RankRecord(query, answers, ranks)


def reciprocal_ranks(queries, store, scheme=None, batch_size=256):
    """All reciprocal ranks of all hard answers of ``queries``, in query order."""
    out = []
    for start in range(0, len(queries), batch_size):
        chunk = queries[start : start + batch_size]
        scores = bb.score_all([g.tree for g in chunk], store, scheme)
        for g, row in zip(chunk, scores):
            out.extend(filtered_ranks(g, store, scheme, scores=row).reciprocal_ranks)
    return out


def mrr(queries, store, scheme=None):
    """Mean reciprocal rank in percent, averaged over hard answers."""
    rr = reciprocal_ranks(queries, store, scheme)
    return 100.0 * float(np.mean(rr))


def random_mrr(queries, num_entities, rng):
    """MRR (percent) of a scorer that assigns uniformly shuffled scores."""
    rr = []
    for g in queries:
        scores = rng.permutation(num_entities).astype(float)
        _, ranks = ranks_from_scores(scores, g.easy_answers, g.hard_answers)
        rr.extend(1.0 / r for r in ranks)
    return 100.0 * float(np.mean(rr))


@dataclass
class ResultTable:
    setting: str
    columns: list
    rows: dict = field(default_factory=dict)

    def add_row(self, label, values):
        row = {c: float(values[c]) for c in self.columns}
        row["AVG"] = float(np.mean([row[c] for c in self.columns]))
        self.rows[label] = row

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["Algorithm", *self.columns, "AVG"])
        for label, row in self.rows.items():
            writer.writerow([label, *(f"{row[c]:.2f}" for c in [*self.columns, "AVG"])])
        return buf.getvalue()

    def to_text(self):
        header = ["Algorithm", *self.columns, "AVG."]
        body = [[label, *(f"{row[c]:.2f}" for c in [*self.columns, "AVG"])] for label, row in self.rows.items()]
        widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
        fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))  # noqa: E731
        rule = "-" * len(fmt(header))
        return "\n".join([f"setting: {self.setting}", rule, fmt(header), rule, *map(fmt, body), rule]) + "\n"

    @classmethod
    def mean_of(cls, tables):
        """Cell-wise mean of tables with identical layout (e.g. across seeds)."""
        first = tables[0]
        out = cls(first.setting, list(first.columns))
        for label in first.rows:
            out.add_row(label, {c: np.mean([t.rows[label][c] for t in tables]) for c in first.columns})
        return out


def mrr_table(dataset, entries, templates=None):
    """Per-template MRR rows for labeled models.

    ``entries`` holds ``(label, store, scheme)`` triples where ``store`` is a
    ParameterStore or a mapping ``template_name -> ParameterStore`` (per-type
    adapted models).
    """
    templates = dataset.eval_types if templates is None else templates
    table = ResultTable(dataset.setting.value, list(templates))
    for label, store, scheme in entries:
        values = {}
        for name in templates:
            model = store[name] if isinstance(store, Mapping) else store
            values[name] = mrr(dataset.eval_queries[name], model, scheme)
        table.add_row(label, values)
    return table
