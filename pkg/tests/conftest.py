import numpy as np
import pytest

from rhgn.hetgraph import HetGraph, LabelTable
from rhgn.model import init_params


def random_graph(rng, n_nodes=10, n_types=3, n_relations=4, n_edges=None, types=None):
    """Random typed multigraph; every node type and relation occurs."""
    type_names = types or [f"t{i}" for i in range(n_types)]
    node_types = [type_names[i % len(type_names)] for i in range(n_nodes)]
    rng.shuffle(node_types)
    n_edges = n_edges if n_edges is not None else 3 * n_nodes
    rels = [f"r{i}" for i in range(n_relations)]
    edges = []
    for k in range(n_edges):
        s, t = rng.integers(n_nodes, size=2)
        edges.append((f"n{s}", f"n{t}", rels[k % n_relations]))
    return HetGraph([f"n{i}" for i in range(n_nodes)], node_types, edges)


def randomize(model, rng, scale=1.0):
    """Generic parameter values (nonzero biases, O(1) embeddings)."""
    for p in model.parameters():
        if p.name.startswith("emb/"):
            p.value = rng.normal(0.0, scale, p.shape)
        elif p.name.endswith("/b"):
            p.value = rng.normal(0.0, 0.3, p.shape)
        elif "/rel:" in p.name:
            p.value = p.value + rng.normal(0.0, 0.3, p.shape)
        p.zero_grad()
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_setup(rng):
    graph = random_graph(rng, n_nodes=8, n_edges=20)
    model = randomize(init_params(graph, d=8, h=2, L=2, P=3, seed=3), rng)
    labels = LabelTable({f"n{i}": i % 3 for i in range(0, 8, 2)}, 3)
    return graph, model, labels


@pytest.fixture
def tsv_fixture(tmp_path):
    nodes = tmp_path / "nodes.tsv"
    edges = tmp_path / "edges.tsv"
    nodes.write_text("u1\tuser\ni1\titem\na1\tattr\n", encoding="utf-8")
    edges.write_text("u1\ti1\tclick\ni1\ta1\thas_attr\n", encoding="utf-8")
    return nodes, edges


# ---------------------------------------------------------------- acceptance summary

_criteria = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    mark = _criteria_marks.get(report.nodeid)
    if mark is None:
        return
    n, title = mark
    prev = _criteria.get(n, (title, True))
    _criteria[n] = (title, prev[1] and report.outcome == "passed")


_criteria_marks = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _criteria_marks[item.nodeid] = mark.args


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, ok = _criteria[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}")
