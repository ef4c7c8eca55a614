import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from astcomplete.corpus import (EMPTY, PAD, AstNode, AstTree, NodeLabel, flatten, flatten_with_paths,
                                iter_ast_file, list_ast_files, make_queries, parse_ast_json, path_to_root,
                                prefix_tree, preorder, tree_from_python_source, tree_to_json)
from astcomplete.errors import ParseError, StructureError


def build(spec):
    """Nested ``(type, value, [children])`` tuples to an AstTree in pre-order."""
    nodes = []

    def add(item):
        t, v, kids = item
        idx = len(nodes)
        nodes.append(None)
        child_ids = [add(k) for k in kids]
        nodes[idx] = AstNode(t, v, tuple(child_ids))
        return idx

    add(spec)
    return AstTree(tuple(nodes))


def leaf(t, v=None):
    return (t, v, [])


# A while loop holding ``if ...: break``, with the assignments around it.
LOOP_TREE = build(("Module", None, [
    ("Assign", None, [leaf("NameStore", "count"), leaf("Num", "0")]),
    ("While", None, [
        ("Compare", None, [leaf("NameLoad", "count"), leaf("Num", "10")]),
        ("body", None, [
            ("AugAssign", None, [leaf("NameStore", "count"), leaf("Num", "1")]),
            ("If", None, [
                ("Compare", None, [leaf("NameLoad", "count"), leaf("Num", "5")]),
                ("body", None, [leaf("Break")]),
            ]),
        ]),
    ]),
]))

# def f(a, b): return a + b
FUNCTION_TREE = build(("FunctionDef", "f", [
    ("arguments", None, [leaf("NameParam", "a"), leaf("NameParam", "b")]),
    ("body", None, [
        ("Return", None, [
            ("BinOp", None, [leaf("NameLoad", "a"), leaf("NameLoad", "b")]),
        ]),
    ]),
]))


def find(tree, t, v=None):
    return next(i for i, n in enumerate(tree.nodes) if n.type == t and n.value == v)


def naive_path(tree, index, m):
    parent = {}
    for i, n in enumerate(tree.nodes):
        for c in n.children:
            parent[c] = i
    out = []
    while index in parent:
        index = parent[index]
        out.append(tree.nodes[index].type)
    out = out[:m]
    return tuple(out + [PAD] * (m - len(out)))


def naive_preorder(tree, i=0):
    out = [i]
    for c in tree.nodes[i].children:
        out.extend(naive_preorder(tree, c))
    return out


def test_parse_single_node():
    tree = parse_ast_json('[{"type":"Module"}]')
    assert len(tree) == 1
    assert tree.nodes[0].children == ()


def test_parse_two_nodes_parent():
    tree = parse_ast_json('[{"type":"Module","children":[1]},{"type":"Break"}]')
    assert len(tree) == 2
    assert tree.parent(1) == 0
    assert tree.parent(0) == -1


def test_dataset_trailing_zero_is_ignored():
    tree = parse_ast_json('[{"type":"Module","children":[1]},{"type":"Break"},0]')
    assert len(tree) == 2


def test_non_string_values_are_stringified():
    tree = parse_ast_json('[{"type":"Num","value":3}]')
    assert tree.nodes[0].value == "3"


@pytest.mark.parametrize("line, index", [
    ('[{"type":"A","children":[2]}]', 0),
    ('[{"type":"A","children":[1,1]},{"type":"B"}]', 0),
    ('[{"type":"A","children":[1]},{"type":"B","children":[1]}]', 1),
    ('[{"type":"A","children":[1]},{"type":"B","children":[0]}]', 1),
    ('[{"type":"A"},{"type":"B"}]', 1),
    ('[{"type":"A","children":[1,2]},{"type":"B","children":[2]},{"type":"C"}]', 1),
])
def test_structure_errors_name_a_node(line, index):
    with pytest.raises(StructureError) as info:
        parse_ast_json(line)
    assert info.value.node_index == index


@pytest.mark.parametrize("line", [
    "{not json",
    '{"type":"A"}',
    "[]",
    '[{"value":"x"}]',
    '[{"type":""}]',
    '[{"type":"A","children":"1"}]',
    '[{"type":"A","value":[1]}]',
])
def test_parse_errors(line):
    with pytest.raises(ParseError):
        parse_ast_json(line, line_no=7)


def test_parse_error_carries_line_number():
    with pytest.raises(ParseError, match="line 7"):
        parse_ast_json("{oops", line_no=7)


def test_json_round_trip():
    assert parse_ast_json(tree_to_json(LOOP_TREE)) == LOOP_TREE


def test_flatten_single():
    tree = parse_ast_json('[{"type":"Module"}]')
    assert flatten(tree) == [NodeLabel("Module", EMPTY)]


def test_flatten_parent_before_children():
    tree = build(("A", None, [leaf("B"), leaf("C")]))
    assert flatten(tree) == [NodeLabel("A", EMPTY), NodeLabel("B", EMPTY), NodeLabel("C", EMPTY)]


def test_flatten_ends_with_last_leaf():
    flat = flatten(FUNCTION_TREE)
    assert flat[-1] == NodeLabel("NameLoad", "b")
    assert str(flat[-1]) == "NameLoad[b]"
    assert flat[0] == NodeLabel("FunctionDef", "f")


def test_break_path():
    path = path_to_root(LOOP_TREE, find(LOOP_TREE, "Break"), 5)
    assert path.ids == ("body", "If", "body", "While", "Module")
    assert path.true_length == 5


def test_binop_operand_path():
    path = path_to_root(FUNCTION_TREE, find(FUNCTION_TREE, "NameLoad", "b"), 5)
    assert path.ids == ("BinOp", "Return", "body", "FunctionDef", PAD)
    assert path.true_length == 4


@pytest.mark.parametrize("m", [1, 3, 9])
def test_root_path_is_all_pad(m):
    path = path_to_root(LOOP_TREE, 0, m)
    assert path.ids == (PAD,) * m
    assert path.true_length == 0


def test_deep_chain_keeps_nearest_ancestors():
    spec = leaf("L8")
    for d in range(7, -1, -1):
        spec = (f"N{d}", None, [spec])
    tree = build(spec)
    deepest = len(tree) - 1
    path = path_to_root(tree, deepest, 5)
    assert path.ids == naive_path(tree, deepest, 5)
    assert path.ids == ("N7", "N6", "N5", "N4", "N3")


def test_path_errors():
    with pytest.raises(IndexError):
        path_to_root(LOOP_TREE, len(LOOP_TREE), 5)
    with pytest.raises(IndexError):
        path_to_root(LOOP_TREE, -1, 5)
    with pytest.raises(ValueError):
        path_to_root(LOOP_TREE, 0, 0)


def test_single_node_queries():
    (q,) = make_queries(parse_ast_json('[{"type":"Module"}]'), 5)
    assert q.context == ()
    assert q.position == 0


def test_break_query():
    queries = make_queries(LOOP_TREE, 5)
    q = next(q for q in queries if q.target.type == "Break")
    flat = flatten(LOOP_TREE)
    assert q.context == tuple(flat[:q.position])
    assert q.position == len(flat) - 1
    assert q.path.ids == ("body", "If", "body", "While", "Module")


@st.composite
def random_trees(draw, max_nodes=40):
    n = draw(st.integers(1, max_nodes))
    parents = [draw(st.integers(0, i - 1)) for i in range(1, n)]
    children = [[] for _ in range(n)]
    for child, parent in enumerate(parents, start=1):
        children[parent].append(child)
    types = draw(st.lists(st.sampled_from("ABCDEFG"), min_size=n, max_size=n))
    nodes = tuple(
        AstNode(types[i], None if children[i] else f"v{i % 3}", tuple(children[i])) for i in range(n)
    )
    return AstTree(nodes)


@settings(max_examples=1000, deadline=None)
@given(random_trees(), st.integers(1, 8))
def test_paths_match_naive_walk(tree, m):
    for i in range(len(tree)):
        path = path_to_root(tree, i, m)
        assert path.ids == naive_path(tree, i, m)
        assert len(path.ids) == m
        assert all(x == PAD for x in path.ids[path.true_length:])


@settings(max_examples=200, deadline=None)
@given(random_trees(), st.integers(1, 6))
def test_queries_cover_every_node(tree, m):
    order = preorder(tree)
    assert order == naive_preorder(tree)
    assert sorted(order) == list(range(len(tree)))
    pos = {node: p for p, node in enumerate(order)}
    for i in range(1, len(tree)):
        assert pos[tree.parent(i)] < pos[i]
    flat = flatten(tree)
    queries = make_queries(tree, m)
    assert len(queries) == len(tree) == len(flat)
    for i, q in enumerate(queries):
        assert q.position == i
        assert q.context == tuple(flat[:i])
        assert q.target == flat[i]
        assert q.path.ids == naive_path(tree, order[i], m)
    program = flatten_with_paths(tree, m)
    assert program.labels == flat
    assert [p.ids for p in program.paths] == [q.path.ids for q in queries]


@settings(max_examples=100, deadline=None)
@given(random_trees(), st.data())
def test_prefix_tree_flattens_to_prefix(tree, data):
    n = data.draw(st.integers(1, len(tree)))
    assert flatten(prefix_tree(tree, n)) == flatten(tree)[:n]


def test_value_absent_iff_empty():
    for lbl in flatten(LOOP_TREE):
        assert lbl.type != EMPTY
    values = {(n.type, n.value) for n in LOOP_TREE.nodes}
    assert ("Break", None) in values
    assert NodeLabel("Break", EMPTY) in flatten(LOOP_TREE)


def test_iter_ast_file_reports_bad_lines(tmp_path):
    f = tmp_path / "a.jsonl"
    f.write_text('[{"type":"Module"}]\n\n{broken\n[{"type":"A","children":[3]}]\n')
    results = list(iter_ast_file(f))
    assert [r.line_no for r in results] == [1, 3, 4]
    assert results[0].tree is not None
    assert isinstance(results[1].error, ParseError)
    assert isinstance(results[2].error, StructureError)


def test_list_ast_files_sorted(tmp_path):
    (tmp_path / "b.json").write_text("")
    (tmp_path / "a.jsonl").write_text("")
    (tmp_path / "notes.txt").write_text("")
    assert [p.rsplit("/", 1)[-1] for p in list_ast_files(tmp_path)] == ["a.jsonl", "b.json"]


def test_python_adapter_produces_valid_preorder_tree():
    tree = tree_from_python_source("def f(a, b):\n    return a + b\n")
    assert preorder(tree) == list(range(len(tree)))
    flat = flatten(tree)
    assert flat[-1] == NodeLabel("NameLoad", "b")
    idx = len(tree) - 1
    assert path_to_root(tree, idx, 4).ids[:2] == ("BinOp", "Return")
    json.loads(tree_to_json(tree))
