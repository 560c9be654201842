import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rhgn.exceptions import (
    BadRatios,
    DimensionMismatch,
    DuplicateId,
    EmptyGraph,
    EmptyLabelSet,
    MalformedLine,
    MissingNode,
    ReservedSuffixCollision,
    UnknownRelation,
)
from rhgn.hetgraph import (
    HetGraph,
    LabelTable,
    add_reverse_relations,
    consolidate_relations,
    load_embeddings,
    load_graph,
    load_labels,
    parse_consolidation,
    split_labels,
    write_graph,
)

from conftest import random_graph


def test_load_fixture(tsv_fixture):
    g = load_graph(*tsv_fixture)
    assert g.num_nodes == 3
    assert g.num_edges == 2
    assert g.meta_relations == {("user", "click", "item"), ("item", "has_attr", "attr")}
    assert g.node_type_set == {"user", "item", "attr"}
    assert g.in_adjacency("i1") == {"click": [("u1", 0)]}
    assert g.in_adjacency("u1") == {}


def test_missing_node(tmp_path, tsv_fixture):
    nodes, edges = tsv_fixture
    edges.write_text("u9\ti1\tclick\n")
    with pytest.raises(MissingNode):
        load_graph(nodes, edges)


def test_duplicate_id(tsv_fixture):
    nodes, edges = tsv_fixture
    nodes.write_text("u1\tuser\nu1\tuser\ni1\titem\na1\tattr\n")
    with pytest.raises(DuplicateId):
        load_graph(nodes, edges)


def test_malformed_and_empty(tsv_fixture):
    nodes, edges = tsv_fixture
    edges.write_text("u1\ti1\n")
    with pytest.raises(MalformedLine):
        load_graph(nodes, edges)
    nodes.write_text("")
    with pytest.raises(EmptyGraph):
        load_graph(nodes, edges)


def test_in_adjacency_matches_edges(rng):
    g = random_graph(rng, n_nodes=12, n_edges=40)
    for nid in g.node_ids:
        listed = sorted(e for group in g.in_adjacency(nid).values() for _, e in group)
        expected = [k for k, (_, t, _) in enumerate(g.edges()) if t == nid]
        assert listed == expected


def test_tsv_round_trip(tmp_path, rng):
    g = random_graph(rng, n_nodes=15, n_edges=30)
    write_graph(g, tmp_path / "n.tsv", tmp_path / "e.tsv")
    again = load_graph(tmp_path / "n.tsv", tmp_path / "e.tsv")
    assert again == g
    assert again.edges() == g.edges()


def test_add_reverse(tsv_fixture):
    g = add_reverse_relations(load_graph(*tsv_fixture))
    assert g.num_edges == 4
    assert set(g.relation_types) == {"click", "has_attr", "click_rev", "has_attr_rev"}
    assert g.edges()[:2] == [("u1", "i1", "click"), ("i1", "a1", "has_attr")]
    assert ("i1", "u1", "click_rev") in g.edges()


def test_add_reverse_empty_and_twice(tsv_fixture):
    g = HetGraph(["a", "b"], ["x", "y"], [])
    assert add_reverse_relations(g).num_edges == 0
    once = add_reverse_relations(load_graph(*tsv_fixture))
    with pytest.raises(ReservedSuffixCollision):
        add_reverse_relations(once)


def test_consolidate():
    edges = [("u", "i", "click")] * 5 + [("u", "i", "purchase")] * 3 + [("i", "a", "has_attr")]
    g = HetGraph(["u", "i", "a"], ["user", "item", "attr"], edges)
    merged = consolidate_relations(g, {"click": "interact", "purchase": "interact"})
    assert merged.relations.count("interact") == 8
    assert merged.num_edges == g.num_edges and merged.num_nodes == g.num_nodes
    assert merged.meta_relations == {("user", "interact", "item"), ("item", "has_attr", "attr")}
    assert consolidate_relations(g, {}) == g
    with pytest.raises(UnknownRelation):
        consolidate_relations(g, {"view": "interact"})


def test_parse_consolidation():
    assert parse_consolidation("consolidate=click,purchase:interact") == {
        "click": "interact", "purchase": "interact"}
    assert parse_consolidation("a:b;c,d:e") == {"a": "b", "c": "e", "d": "e"}
    with pytest.raises(ValueError):
        parse_consolidation("click,purchase")


def test_split_sizes_and_determinism():
    labels = LabelTable({f"n{i}": i % 2 for i in range(1000)}, 2)
    s = split_labels(labels, (0.75, 0.125, 0.125), seed=7)
    assert (len(s.train_ids), len(s.valid_ids), len(s.test_ids)) == (750, 125, 125)
    assert split_labels(labels, (0.75, 0.125, 0.125), seed=7) == s
    assert split_labels(labels, (0.75, 0.125, 0.125), seed=8) != s


def test_split_errors():
    labels = LabelTable({"a": 0, "b": 1}, 2)
    with pytest.raises(BadRatios):
        split_labels(labels, (0.5, 0.5, 0.5))
    with pytest.raises(BadRatios):
        split_labels(labels, (1.0, 0.0, 0.0))
    with pytest.raises(EmptyLabelSet):
        split_labels(LabelTable({}, 2), (0.75, 0.125, 0.125))


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 400), seed=st.integers(0, 2 ** 16),
       w=st.tuples(st.integers(1, 20), st.integers(1, 20), st.integers(1, 20)))
def test_split_is_partition(n, seed, w):
    ratios = tuple(x / sum(w) for x in w)
    labels = LabelTable({f"n{i}": i % 3 for i in range(n)}, 3)
    s = split_labels(labels, ratios, seed)
    parts = [set(s.train_ids), set(s.valid_ids), set(s.test_ids)]
    assert sum(map(len, parts)) == n
    assert set().union(*parts) == set(labels.labels)
    for size, r in zip(map(len, parts), ratios):
        assert abs(size - n * r) < 1.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_consolidate_preserves_counts(seed):
    g = random_graph(np.random.default_rng(seed), n_nodes=9, n_edges=25)
    merged = consolidate_relations(g, {"r0": "m", "r1": "m"})
    assert (merged.num_nodes, merged.num_edges) == (g.num_nodes, g.num_edges)
    assert merged.meta_relations == {
        (g.node_types[s], r, g.node_types[t])
        for s, t, r in zip(merged.src, merged.dst, merged.relations)
    }


def test_load_embeddings(tmp_path):
    f = tmp_path / "emb.tsv"
    f.write_text("a\t1\t2\t3\t4\nb\t0.5\t0\t0\t-1\n")
    table = load_embeddings(f, 4)
    assert len(table) == 2
    np.testing.assert_array_equal(table.vectors["b"], [0.5, 0, 0, -1])
    f.write_text("a\t1\t2\t3\n")
    with pytest.raises(DimensionMismatch):
        load_embeddings(f, 4)
    f.write_text("a\t1\tx\t3\t4\n")
    with pytest.raises(MalformedLine):
        load_embeddings(f, 4)
    f.write_text("")
    assert len(load_embeddings(f, 4)) == 0


def test_load_labels(tmp_path, tsv_fixture):
    g = load_graph(*tsv_fixture)
    f = tmp_path / "labels.tsv"
    f.write_text("u1\tgender\t1\nu1\tage\t3\n")
    lab = load_labels(f, task="age", graph=g)
    assert lab.labels == {"u1": 3} and lab.num_classes == 4
    assert load_labels(f, task="gender").num_classes == 2
    with pytest.raises(ValueError):
        load_labels(f)
    f.write_text("zz\tgender\t1\n")
    with pytest.raises(MissingNode):
        load_labels(f, graph=g)
