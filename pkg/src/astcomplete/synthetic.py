"""Random ESTree-flavoured programs for smoke tests and toy experiments.

Each program declares a ``mode`` right after its header. Leaf expression
types depend on that mode and on the statement nesting depth, and every
leaf's value is a fixed function of its type, so:

* predicting leaf types needs context that reaches back to the declaration
  (beyond one segment for long programs), and
* the nesting depth is read most directly off the path-to-root.
"""
from __future__ import annotations

import random
from typing import Optional

from .corpus import AstNode, AstTree

LEAF_TYPES = ("Identifier", "Literal", "ThisExpression", "ArrayExpression")
LEAF_VALUES = {"Identifier": "x", "Literal": "0", "ThisExpression": None, "ArrayExpression": None}
STATEMENTS = (
    "ExpressionStatement", "ExpressionStatement", "IfStatement", "WhileStatement", "ForStatement",
    "ReturnStatement", "ThrowStatement", "TryStatement", "SwitchStatement", "ContinueStatement",
)


class _Builder:
    def __init__(self, rng: random.Random, mode: int, max_depth: int):
        self.rng = rng
        self.mode = mode
        self.max_depth = max_depth
        self.nodes: list[dict] = []

    def add(self, t, value=None, parent=None):
        self.nodes.append({"type": t, "value": value, "children": []})
        idx = len(self.nodes) - 1
        if parent is not None:
            self.nodes[parent]["children"].append(idx)
        return idx

    def leaf(self, parent, depth):
        t = LEAF_TYPES[(self.mode + depth) % len(LEAF_TYPES)]
        self.add(t, LEAF_VALUES[t], parent)

    def expr(self, parent, depth):
        if self.rng.random() < 0.4:
            b = self.add("BinaryExpression", parent=parent)
            self.leaf(b, depth)
            self.leaf(b, depth)
        else:
            self.leaf(parent, depth)

    def block(self, parent, depth, kind="BlockStatement"):
        blk = self.add(kind, parent=parent)
        for _ in range(self.rng.randint(1, 3)):
            self.statement(blk, depth)
        return blk

    def statement(self, parent, depth):
        choices = STATEMENTS if depth < self.max_depth else (
            "ExpressionStatement", "ReturnStatement", "ThrowStatement", "ContinueStatement")
        kind = self.rng.choice(choices)
        s = self.add(kind, parent=parent)
        if kind in ("ExpressionStatement", "ReturnStatement"):
            self.expr(s, depth)
        elif kind == "ThrowStatement":
            n = self.add("NewExpression", parent=s)
            self.add("Identifier", "Error", n)
        elif kind in ("IfStatement", "WhileStatement", "ForStatement"):
            self.expr(s, depth)
            self.block(s, depth + 1)
        elif kind == "TryStatement":
            self.block(s, depth + 1)
            c = self.add("CatchClause", parent=s)
            self.add("Identifier", "e", c)
            self.block(c, depth + 1)
        elif kind == "SwitchStatement":
            self.expr(s, depth)
            for _ in range(self.rng.randint(1, 2)):
                case = self.add("SwitchCase", parent=s)
                self.expr(case, depth + 1)
                self.statement(case, depth + 1)


def random_program(rng: random.Random, *, n_modes: int = 4, max_depth: int = 2,
                   n_statements: tuple[int, int] = (4, 8), tag: Optional[str] = None) -> AstTree:
    """One random program; ``tag`` adds a unique leading string literal."""
    mode = rng.randrange(n_modes)
    b = _Builder(rng, mode, max_depth)
    root = b.add("Program")
    if tag is not None:
        s = b.add("ExpressionStatement", parent=root)
        b.add("Literal", tag, s)
    decl = b.add("VariableDeclaration", parent=root)
    d = b.add("VariableDeclarator", parent=decl)
    b.add("Identifier", "mode", d)
    b.add("Literal", f"mode{mode}", d)
    for _ in range(rng.randint(*n_statements)):
        b.statement(root, 0)
    # Children are appended depth-first, so indices are already pre-order.
    return AstTree(tuple(AstNode(n["type"], n["value"], tuple(n["children"])) for n in b.nodes))


def synthetic_corpus(n_programs: int, seed: int = 0, *, tagged: bool = False, **kwargs) -> list[AstTree]:
    rng = random.Random(seed)
    return [
        random_program(rng, tag=f"doc{seed}_{i}" if tagged else None, **kwargs)
        for i in range(n_programs)
    ]
