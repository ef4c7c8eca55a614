"""Serialized ASTs: parsing, flattening, path-to-root features and queries.

Trees arrive as newline-delimited JSON, one program per line, each line an
array of node objects::

    [{"type": "Module", "children": [1]}, {"type": "Break"}]

Node 0 is the root and every child index is larger than its parent's index.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional, Sequence

from .errors import ParseError, StructureError

EMPTY = "<EMPTY>"
PAD = "<PAD>"
UNK = "<UNK>"


@dataclass(frozen=True)
class AstNode:
    type: str
    value: Optional[str] = None
    children: tuple[int, ...] = ()


@dataclass(frozen=True)
class AstTree:
    """A validated tree. Construction fails with StructureError otherwise."""

    nodes: tuple[AstNode, ...]
    root_index: int = 0
    parents: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "parents", _derive_parents(self.nodes))

    def __len__(self):
        return len(self.nodes)

    def parent(self, index: int) -> int:
        """Parent index, or -1 for the root."""
        return self.parents[index]


class NodeLabel(NamedTuple):
    type: str
    value: str

    def __str__(self):
        return f"{self.type}[{self.value}]"


class PathIds(NamedTuple):
    """Ancestor symbols nearest-first, padded to a fixed length."""

    ids: tuple
    true_length: int


class Query(NamedTuple):
    context: tuple[NodeLabel, ...]
    target: NodeLabel
    path: PathIds
    position: int
    node_index: int


def _derive_parents(nodes: Sequence[AstNode]) -> tuple[int, ...]:
    n = len(nodes)
    if n == 0:
        raise StructureError("tree has no nodes")
    parents = [-2] * n
    parents[0] = -1
    for i, node in enumerate(nodes):
        if not isinstance(node.type, str) or not node.type:
            raise StructureError("type must be a nonempty string", i)
        for c in node.children:
            if not 0 <= c < n:
                raise StructureError(f"dangling child index {c}", i)
            if c <= i:
                raise StructureError(f"child index {c} does not follow its parent (cycle or bad order)", i)
            if parents[c] != -2:
                raise StructureError(f"child {c} already attached to node {parents[c]}", i)
            parents[c] = i
    orphans = [i for i in range(1, n) if parents[i] == -2]
    if orphans:
        raise StructureError(f"multiple roots: node has no parent", orphans[0])
    return tuple(parents)


def _node_from_obj(obj, index: int, line_no=None) -> AstNode:
    if not isinstance(obj, dict):
        raise ParseError(f"node {index} is not an object", line_no)
    t = obj.get("type")
    if not isinstance(t, str) or not t:
        raise ParseError(f"node {index} lacks a nonempty 'type'", line_no)
    value = obj.get("value")
    if value is not None:
        if isinstance(value, (dict, list)):
            raise ParseError(f"node {index} has a non-scalar value", line_no)
        value = value if isinstance(value, str) else json.dumps(value)
    children = obj.get("children", [])
    if not isinstance(children, list) or not all(
        isinstance(c, int) and not isinstance(c, bool) for c in children
    ):
        raise ParseError(f"node {index} has malformed 'children'", line_no)
    return AstNode(t, value, tuple(children))


def parse_ast_json(line: str, line_no: Optional[int] = None) -> AstTree:
    """Parse one serialized tree.

    A trailing bare ``0`` (present in the published py150/js150 dumps) is
    ignored.
    """
    try:
        data = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc.msg}", line_no) from None
    if not isinstance(data, list):
        raise ParseError("expected a JSON array of nodes", line_no)
    if data and data[-1] == 0 and not isinstance(data[-1], bool):
        data = data[:-1]
    if not data:
        raise ParseError("empty node list", line_no)
    nodes = tuple(_node_from_obj(obj, i, line_no) for i, obj in enumerate(data))
    return AstTree(nodes)


def tree_to_json(tree: AstTree) -> str:
    out = []
    for node in tree.nodes:
        obj = {"type": node.type}
        if node.value is not None:
            obj["value"] = node.value
        if node.children:
            obj["children"] = list(node.children)
        out.append(obj)
    return json.dumps(out, separators=(",", ":"))


def preorder(tree: AstTree) -> list[int]:
    """Node indices in depth-first order, each node before its children."""
    order = []
    stack = [tree.root_index]
    while stack:
        i = stack.pop()
        order.append(i)
        stack.extend(reversed(tree.nodes[i].children))
    return order


def label(node: AstNode) -> NodeLabel:
    return NodeLabel(node.type, EMPTY if node.value is None else node.value)


def flatten(tree: AstTree) -> list[NodeLabel]:
    return [label(tree.nodes[i]) for i in preorder(tree)]


def path_to_root(tree: AstTree, node_index: int, m: int) -> PathIds:
    """Types of the ``m`` nearest ancestors of ``node_index``, parent first.

    Deeper ancestors than ``m`` are dropped; shorter paths are PAD-filled at
    the root end.
    """
    if m < 1:
        raise ValueError("path length m must be >= 1")
    if not 0 <= node_index < len(tree.nodes):
        raise IndexError(f"node index {node_index} out of range for tree of {len(tree.nodes)} nodes")
    ids = []
    p = tree.parents[node_index]
    while p >= 0 and len(ids) < m:
        ids.append(tree.nodes[p].type)
        p = tree.parents[p]
    true_length = len(ids)
    ids.extend([PAD] * (m - true_length))
    return PathIds(tuple(ids), true_length)


def make_queries(tree: AstTree, m: int) -> list[Query]:
    order = preorder(tree)
    flat = tuple(label(tree.nodes[i]) for i in order)
    return [
        Query(flat[:pos], flat[pos], path_to_root(tree, idx, m), pos, idx)
        for pos, idx in enumerate(order)
    ]


def prefix_tree(tree: AstTree, n: int) -> AstTree:
    """The partial tree made of the first ``n`` nodes in pre-order."""
    if not 1 <= n <= len(tree.nodes):
        raise ValueError(f"prefix length must lie in [1, {len(tree.nodes)}], got {n}")
    order = preorder(tree)[:n]
    new_id = {old: new for new, old in enumerate(order)}
    nodes = []
    for old in order:
        node = tree.nodes[old]
        kids = tuple(new_id[c] for c in node.children if c in new_id)
        nodes.append(AstNode(node.type, node.value, kids))
    return AstTree(tuple(nodes))


class FlatProgram(NamedTuple):
    """A flattened program with the path of every position precomputed."""

    labels: list[NodeLabel]
    paths: list[PathIds]


def flatten_with_paths(tree: AstTree, m: int) -> FlatProgram:
    order = preorder(tree)
    return FlatProgram(
        [label(tree.nodes[i]) for i in order],
        [path_to_root(tree, i, m) for i in order],
    )


class LineResult(NamedTuple):
    path: str
    line_no: int
    tree: Optional[AstTree]
    error: Optional[Exception]


def iter_ast_file(path) -> Iterator[LineResult]:
    """Yield one result per non-blank line; errors are returned, not raised."""
    path = os.fspath(path)
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield LineResult(path, line_no, parse_ast_json(line, line_no), None)
            except (ParseError, StructureError) as exc:
                yield LineResult(path, line_no, None, exc)


def list_ast_files(input_dir) -> list[str]:
    """Sorted ``*.json``/``*.jsonl`` files below ``input_dir`` (or the file itself)."""
    input_dir = os.fspath(input_dir)
    if os.path.isfile(input_dir):
        return [input_dir]
    found = []
    for root, _dirs, files in os.walk(input_dir):
        for name in files:
            if name.endswith((".json", ".jsonl")):
                found.append(os.path.join(root, name))
    return sorted(found)


_LIST_WRAPPED_MODULES = ("Module", "Interactive")


def tree_from_python_source(source: str) -> AstTree:
    """Convenience adapter from Python source to the node-list format.

    Mirrors the py150 layout loosely: statement lists other than a module's
    top level become wrapper nodes named after the field (``body``,
    ``orelse``), ``Name``/``Attribute`` carry their context in the type
    (``NameLoad``), and identifiers and constants are leaf values.
    """
    import ast

    nodes: list[dict] = []

    def add(t, value=None):
        nodes.append({"type": t, "value": value, "children": []})
        return len(nodes) - 1

    def visit(node) -> int:
        t = type(node).__name__
        if isinstance(node, (ast.Name, ast.Attribute)):
            t += type(node.ctx).__name__
        if isinstance(node, ast.Name):
            return add(t, node.id)
        if isinstance(node, ast.Constant):
            kind = {str: "Str", bytes: "Bytes", bool: "Bool"}.get(type(node.value), "Num")
            if node.value is None:
                kind = "NoneConst"
            return add(kind, repr(node.value) if kind != "Str" else node.value)
        if isinstance(node, ast.arg):
            return add("NameParam", node.arg)
        idx = add(t)
        for fname, fval in ast.iter_fields(node):
            if fname in ("ctx", "type_ignores", "kind", "type_comment"):
                continue
            if isinstance(fval, ast.AST):
                if isinstance(fval, (ast.expr_context, ast.operator, ast.unaryop, ast.cmpop, ast.boolop)):
                    nodes[idx]["children"].append(add(type(fval).__name__))
                else:
                    nodes[idx]["children"].append(visit(fval))
            elif isinstance(fval, list) and fval:
                if t in _LIST_WRAPPED_MODULES:
                    for item in fval:
                        if isinstance(item, ast.AST):
                            nodes[idx]["children"].append(visit(item))
                    continue
                wrapper = add(fname)
                nodes[idx]["children"].append(wrapper)
                for item in fval:
                    if isinstance(item, ast.AST):
                        if isinstance(item, (ast.operator, ast.cmpop, ast.boolop, ast.unaryop)):
                            nodes[wrapper]["children"].append(add(type(item).__name__))
                        else:
                            nodes[wrapper]["children"].append(visit(item))
                    elif isinstance(item, str):
                        nodes[wrapper]["children"].append(add(fname, item))
            elif isinstance(fval, str):
                nodes[idx]["children"].append(add(fname, fval))
        return idx

    visit(ast.parse(source))
    # Parent indices precede child indices by construction, but siblings may
    # not be contiguous; renumber into pre-order so index == flat position.
    raw = AstTree(tuple(AstNode(n["type"], n["value"], tuple(n["children"])) for n in nodes))
    order = preorder(raw)
    new_index = {old: new for new, old in enumerate(order)}
    return AstTree(
        tuple(
            AstNode(
                raw.nodes[old].type,
                raw.nodes[old].value if not raw.nodes[old].children else None,
                tuple(new_index[c] for c in raw.nodes[old].children),
            )
            for old in order
        )
    )
