"""Tree-shaped query expressions, the template grammar and projection-site categorization.

The same node classes represent both templates (where ids are placeholder
indices) and grounded queries (where ids are entity/relation ids). The text
form is a parenthesized prefix notation::

    e<k>                    anchor
    (p,r<k>,EXPR)           projection
    (i,EXPR,EXPR[,EXPR..])  intersection
    (u,EXPR,EXPR[,EXPR..])  union
    (n,EXPR)                negation
"""

from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Union as _U

from .errors import ParseError, StructuralError, UnsupportedStructureError


@dataclass(frozen=True)
class Anchor:
    entity: int


@dataclass(frozen=True)
class Projection:
    relation: int
    child: "QueryTree"


@dataclass(frozen=True)
class Intersection:
    children: tuple["QueryTree", ...]


@dataclass(frozen=True)
class Union:
    children: tuple["QueryTree", ...]


@dataclass(frozen=True)
class Negation:
    child: "QueryTree"


QueryTree = _U[Anchor, Projection, Intersection, Union, Negation]


def children_of(node):
    if isinstance(node, (Projection, Negation)):
        return (node.child,)
    if isinstance(node, (Intersection, Union)):
        return node.children
    return ()


def iter_nodes(tree, path=()):
    """Pre-order ``(path, node)`` pairs."""
    yield path, tree
    for i, child in enumerate(children_of(tree)):
        yield from iter_nodes(child, path + (i,))


def node_at(tree, path):
    for i in path:
        tree = children_of(tree)[i]
    return tree


def serialize(tree):
    if isinstance(tree, Anchor):
        return f"e{tree.entity}"
    if isinstance(tree, Projection):
        return f"(p,r{tree.relation},{serialize(tree.child)})"
    if isinstance(tree, Intersection):
        return "(i," + ",".join(serialize(c) for c in tree.children) + ")"
    if isinstance(tree, Union):
        return "(u," + ",".join(serialize(c) for c in tree.children) + ")"
    if isinstance(tree, Negation):
        return f"(n,{serialize(tree.child)})"
    raise TypeError(f"not a query tree: {tree!r}")


def shape(tree):
    """The tree's structure with all ids erased; queries of one template share it."""
    return re.sub(r"\d+", "", serialize(tree))


class _Parser:
    def __init__(self, text):
        self.text = text
        self.pos = 0

    def _skip(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def _expect(self, ch):
        self._skip()
        if self.pos >= len(self.text) or self.text[self.pos] != ch:
            found = self.text[self.pos] if self.pos < len(self.text) else "end of input"
            raise ParseError(f"expected {ch!r}, found {found!r}", position=self.pos)
        self.pos += 1

    def _peek(self):
        self._skip()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def _symbol(self, prefix):
        self._skip()
        m = re.compile(rf"{prefix}(\d+)").match(self.text, self.pos)
        if not m:
            raise ParseError(f"expected {prefix}<index>", position=self.pos)
        self.pos = m.end()
        return int(m.group(1))

    def expr(self):
        if self._peek() == "e":
            return Anchor(self._symbol("e"))
        self._expect("(")
        start = self.pos
        self._skip()
        op = self.text[self.pos] if self.pos < len(self.text) else ""
        self.pos += 1
        if op == "p":
            self._expect(",")
            rel = self._symbol("r")
            self._expect(",")
            child = self.expr()
            node = Projection(rel, child)
        elif op in ("i", "u"):
            children = []
            while self._peek() == ",":
                self.pos += 1
                children.append(self.expr())
            if len(children) < 2:
                raise ParseError(f"'{op}' needs at least two operands", position=start)
            node = Intersection(tuple(children)) if op == "i" else Union(tuple(children))
        elif op == "n":
            self._expect(",")
            node = Negation(self.expr())
        else:
            raise ParseError(f"unknown operator {op!r}", position=start)
        self._expect(")")
        return node

    def parse(self):
        tree = self.expr()
        self._skip()
        if self.pos != len(self.text):
            raise ParseError("trailing input", position=self.pos)
        return tree


def parse_tree(text):
    """Parse a query string and check the structural rules."""
    tree = _Parser(text).parse()
    validate_tree(tree)
    return tree


def validate_tree(tree):
    """Raise :class:`StructuralError` unless ``tree`` has a benchmark-grammar shape.

    The root must be an operator other than negation; negation may only occur
    as an operand of an intersection; a projection never consumes a negated set
    directly; every leaf is an anchor.
    """
    if isinstance(tree, Anchor):
        raise StructuralError("the root of a query cannot be an anchor")
    if isinstance(tree, Negation):
        raise StructuralError("the root of a query cannot be a negation")

    def walk(node, parent):
        if isinstance(node, Negation) and not isinstance(parent, Intersection):
            raise StructuralError("negation must be a direct operand of an intersection")
        if isinstance(node, Projection) and isinstance(node.child, Negation):
            raise StructuralError("projection of a negated set is outside the grammar")
        if isinstance(node, (Intersection, Union)) and len(node.children) < 2:
            raise StructuralError("intersection/union needs at least two operands")
        if not isinstance(node, (Anchor, Projection, Intersection, Union, Negation)):
            raise StructuralError(f"unknown node {node!r}")
        for child in children_of(node):
            walk(child, node)

    walk(tree, None)


# --------------------------------------------------------------------------
# templates


def _placeholders(tree):
    anchors, relations = [], []
    for _, node in iter_nodes(tree):
        if isinstance(node, Anchor):
            anchors.append(node.entity)
        elif isinstance(node, Projection):
            relations.append(node.relation)
    return anchors, relations


@dataclass(frozen=True)
class QueryTemplate:
    name: str
    tree: QueryTree

    def __post_init__(self):
        validate_tree(self.tree)
        for kind, used in zip(("anchor", "relation"), _placeholders(self.tree)):
            if sorted(used) != list(range(len(used))):
                raise StructuralError(
                    f"template {self.name!r}: {kind} placeholders must be distinct and contiguous, got {used}"
                )

    @property
    def placeholder_count(self):
        anchors, relations = _placeholders(self.tree)
        return len(anchors), len(relations)

    @property
    def text(self):
        return serialize(self.tree)

    def bind(self, anchors, relations):
        """Substitute entity and relation ids for the placeholders."""

        def sub(node):
            if isinstance(node, Anchor):
                return Anchor(int(anchors[node.entity]))
            if isinstance(node, Projection):
                return Projection(int(relations[node.relation]), sub(node.child))
            if isinstance(node, Intersection):
                return Intersection(tuple(sub(c) for c in node.children))
            if isinstance(node, Union):
                return Union(tuple(sub(c) for c in node.children))
            return Negation(sub(node.child))

        return sub(self.tree)

    @property
    def has_negation(self):
        return any(isinstance(n, Negation) for _, n in iter_nodes(self.tree))


def parse_template(text, name=None):
    tree = parse_tree(text)
    return QueryTemplate(name or text, tree)


_BUILTIN = {
    "1p": "(p,r0,e0)",
    "2p": "(p,r1,(p,r0,e0))",
    "3p": "(p,r2,(p,r1,(p,r0,e0)))",
    "4p": "(p,r3,(p,r2,(p,r1,(p,r0,e0))))",
    "5p": "(p,r4,(p,r3,(p,r2,(p,r1,(p,r0,e0)))))",
    "6p": "(p,r5,(p,r4,(p,r3,(p,r2,(p,r1,(p,r0,e0))))))",
    "2i": "(i,(p,r0,e0),(p,r1,e1))",
    "3i": "(i,(p,r0,e0),(p,r1,e1),(p,r2,e2))",
    "ip": "(p,r2,(i,(p,r0,e0),(p,r1,e1)))",
    "pi": "(i,(p,r1,(p,r0,e0)),(p,r2,e1))",
    "2u": "(u,(p,r0,e0),(p,r1,e1))",
    "up": "(p,r2,(u,(p,r0,e0),(p,r1,e1)))",
    "2in": "(i,(p,r0,e0),(n,(p,r1,e1)))",
    "3in": "(i,(p,r0,e0),(p,r1,e1),(n,(p,r2,e2)))",
    "inp": "(p,r2,(i,(p,r0,e0),(n,(p,r1,e1))))",
    "pin": "(i,(p,r1,(p,r0,e0)),(n,(p,r2,e1)))",
    "pni": "(i,(n,(p,r1,(p,r0,e0))),(p,r2,e1))",
}


@lru_cache(maxsize=None)
def _builtin_registry():
    return {name: parse_template(text, name) for name, text in _BUILTIN.items()}


def builtin_templates():
    """The 14 benchmark query types plus the 4p/5p/6p chains, in canonical order."""
    return list(_builtin_registry().values())


def get_template(name):
    try:
        return _builtin_registry()[name]
    except KeyError:
        raise KeyError(f"unknown query template {name!r}") from None


def registry_json(templates=None):
    templates = builtin_templates() if templates is None else templates
    return json.dumps({t.name: t.text for t in templates}, indent=2)


# --------------------------------------------------------------------------
# disjunctive normal form


def _contains_union(tree):
    return any(isinstance(n, Union) for _, n in iter_nodes(tree))


def dnf_decompose(tree):
    """Split a query into union-free conjunctive branches.

    The union of the branches' answer sets equals the answer set of ``tree``.
    A union-free tree comes back as ``[tree]``.
    """
    if not _contains_union(tree):
        return [tree]
    return _dnf(tree)


def _dnf(node):
    if isinstance(node, Anchor):
        return [node]
    if isinstance(node, Projection):
        return [Projection(node.relation, b) for b in _dnf(node.child)]
    if isinstance(node, Intersection):
        return [Intersection(combo) for combo in itertools.product(*(_dnf(c) for c in node.children))]
    if isinstance(node, Union):
        return [b for c in node.children for b in _dnf(c)]
    if isinstance(node, Negation):
        if _contains_union(node.child):
            raise UnsupportedStructureError("union under negation is outside the benchmark grammar")
        return [node]
    raise TypeError(f"not a query tree: {node!r}")


# --------------------------------------------------------------------------
# projection sites and their categories


class Scheme(str, Enum):
    ROOT = "R"
    LEAF = "L"
    INPUT = "I"
    OUTPUT = "O"
    BINARY_INPUT = "BI"
    BINARY_OUTPUT = "BO"


class InputKind(str, Enum):
    ENTITY = "Entity"
    PROJECTION = "Projection"
    INTERSECTION = "Intersection"


class OutputKind(str, Enum):
    PROJECTION = "Projection"
    INTERSECTION = "Intersection"
    NEGATION = "Negation"
    ANSWER = "Answer"


SCHEMES = tuple(Scheme)
DEFAULT_DEPTH_CAP = 3

_INPUT_OF = {Anchor: InputKind.ENTITY, Projection: InputKind.PROJECTION, Intersection: InputKind.INTERSECTION}
_OUTPUT_OF = {Projection: OutputKind.PROJECTION, Intersection: OutputKind.INTERSECTION, Negation: OutputKind.NEGATION}


@dataclass(frozen=True)
class OperatorSite:
    query: QueryTree
    path: tuple[int, ...]
    input_kind: InputKind
    output_kind: OutputKind
    root_distance: int
    leaf_distance: int
    branch: int = 0


def _leaf_distance(node):
    # edges from this node's entity set down to the nearest anchor
    if isinstance(node, Anchor):
        return 0
    return 1 + min(_leaf_distance(c) for c in children_of(node))


def _sites_of_branch(tree, branch):
    sites = []

    def walk(node, parent, path, depth):
        if isinstance(node, Projection):
            child_type = type(node.child)
            if child_type not in _INPUT_OF:
                raise StructuralError(f"projection input {child_type.__name__} has no input category")
            sites.append(
                OperatorSite(
                    query=tree,
                    path=path,
                    input_kind=_INPUT_OF[child_type],
                    output_kind=OutputKind.ANSWER if parent is None else _OUTPUT_OF[type(parent)],
                    root_distance=depth,
                    leaf_distance=_leaf_distance(node),
                    branch=branch,
                )
            )
        for i, child in enumerate(children_of(node)):
            walk(child, node, path + (i,), depth + 1)

    walk(tree, None, (), 1)
    return sites


def enumerate_projection_sites(tree):
    """One site per projection, pre-order, measured inside each DNF branch."""
    sites = []
    for b, branch in enumerate(dnf_decompose(tree)):
        sites.extend(_sites_of_branch(branch, b))
    return sites


@dataclass(frozen=True, order=True)
class OperatorTypeKey:
    scheme: str
    category: _U[int, str]
    operator: str = "projection"

    @property
    def label(self):
        if self.scheme == Scheme.INPUT.value:
            return "P_" + self.category[0].lower()
        return f"{self.scheme}:{self.category}"

    def __str__(self):
        return f"{self.operator}[{self.scheme}={self.category}]"


def category_of(site, scheme, depth_cap=DEFAULT_DEPTH_CAP):
    scheme = Scheme(scheme)
    if depth_cap < 1:
        raise ValueError("depth_cap must be >= 1")
    if scheme is Scheme.ROOT:
        return min(site.root_distance, depth_cap)
    if scheme is Scheme.LEAF:
        return min(site.leaf_distance, depth_cap)
    if scheme is Scheme.INPUT:
        return site.input_kind.value
    if scheme is Scheme.OUTPUT:
        return site.output_kind.value
    if scheme is Scheme.BINARY_INPUT:
        return "Entity" if site.input_kind is InputKind.ENTITY else "NonEntity"
    return "Answer" if site.output_kind is OutputKind.ANSWER else "NonAnswer"


def categorize(site, scheme, depth_cap=DEFAULT_DEPTH_CAP):
    """The operator-type key of ``site`` under ``scheme``.

    Integer categories of the R/L schemes are clamped to ``depth_cap``.
    """
    return OperatorTypeKey(Scheme(scheme).value, category_of(site, scheme, depth_cap))


def scheme_categories(scheme, depth_cap=DEFAULT_DEPTH_CAP):
    """Every category a scheme can produce, in a fixed order."""
    scheme = Scheme(scheme)
    if scheme in (Scheme.ROOT, Scheme.LEAF):
        cats = list(range(1, depth_cap + 1))
    elif scheme is Scheme.INPUT:
        cats = [k.value for k in InputKind]
    elif scheme is Scheme.OUTPUT:
        cats = [k.value for k in OutputKind]
    elif scheme is Scheme.BINARY_INPUT:
        cats = ["Entity", "NonEntity"]
    else:
        cats = ["Answer", "NonAnswer"]
    return [OperatorTypeKey(scheme.value, c) for c in cats]


@lru_cache(maxsize=4096)
def _branch_site_keys(branch_shape_text, scheme, depth_cap):
    tree = _Parser(branch_shape_text).parse()
    return {s.path: categorize(s, scheme, depth_cap) for s in _sites_of_branch(tree, 0)}


def site_keys(branch, scheme, depth_cap=DEFAULT_DEPTH_CAP):
    """Map ``path -> OperatorTypeKey`` for the projections of a union-free tree (cached by shape)."""
    text = serialize(_erase_ids(branch))
    return _branch_site_keys(text, Scheme(scheme).value, depth_cap)


def _erase_ids(node):
    if isinstance(node, Anchor):
        return Anchor(0)
    if isinstance(node, Projection):
        return Projection(0, _erase_ids(node.child))
    if isinstance(node, Intersection):
        return Intersection(tuple(_erase_ids(c) for c in node.children))
    if isinstance(node, Union):
        return Union(tuple(_erase_ids(c) for c in node.children))
    return Negation(_erase_ids(node.child))


def query_categories(tree, scheme, depth_cap=DEFAULT_DEPTH_CAP):
    """The set of operator-type keys occurring anywhere in ``tree``."""
    keys = set()
    for branch in dnf_decompose(tree):
        keys.update(site_keys(branch, scheme, depth_cap).values())
    return keys
