"""Typed heterogeneous graph storage, TSV ingestion and label splits.

Node ids are opaque strings in files and dense integer indices internally
(position in the node file).  Edges are directed ``src -> dst`` and carry a
relation name; parallel edges are kept.
"""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .exceptions import (
    BadRatios,
    DimensionMismatch,
    DuplicateId,
    EmptyGraph,
    EmptyLabelSet,
    LabelError,
    MalformedLine,
    MissingNode,
    ReservedSuffixCollision,
    UnknownRelation,
)

REVERSE_SUFFIX = "_rev"

MetaRelation = Tuple[str, str, str]


def _frozen(a, dtype) -> np.ndarray:
    arr = np.asarray(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


class HetGraph:
    """Immutable directed multigraph with typed nodes and typed edges.

    Parameters
    ----------
    node_ids : sequence of str
        Unique node identifiers; their order fixes the internal index.
    node_types : sequence of str
        ``node_types[i]`` is the type of ``node_ids[i]``.
    edges : iterable of (src_id, dst_id, relation)
        Edge ``k`` in iteration order gets edge id ``k``.
    """

    def __init__(
        self,
        node_ids: Sequence[str],
        node_types: Sequence[str],
        edges: Iterable[Tuple[str, str, str]] = (),
    ):
        node_ids = tuple(str(n) for n in node_ids)
        node_types = tuple(str(t) for t in node_types)
        if len(node_ids) != len(node_types):
            raise ValueError("node_ids and node_types differ in length")
        if not node_ids:
            raise EmptyGraph("graph has no nodes")
        index: Dict[str, int] = {}
        for i, nid in enumerate(node_ids):
            if nid in index:
                raise DuplicateId(f"duplicate node id {nid!r}")
            index[nid] = i

        src, dst, rel = [], [], []
        for s, t, r in edges:
            for endpoint in (s, t):
                if endpoint not in index:
                    raise MissingNode(f"edge references unknown node {endpoint!r}")
            src.append(index[s])
            dst.append(index[t])
            rel.append(str(r))

        self.node_ids: Tuple[str, ...] = node_ids
        self.node_types: Tuple[str, ...] = node_types
        self.index: Mapping[str, int] = index
        self.src = _frozen(src, np.int64)
        self.dst = _frozen(dst, np.int64)
        self.relations: Tuple[str, ...] = tuple(rel)

        self.type_names: Tuple[str, ...] = tuple(sorted(set(node_types)))
        self.relation_types: Tuple[str, ...] = tuple(sorted(set(rel)))
        type_pos = {t: i for i, t in enumerate(self.type_names)}
        rel_pos = {r: i for i, r in enumerate(self.relation_types)}
        self.node_type_index = _frozen([type_pos[t] for t in node_types], np.int64)
        self.edge_relation_index = _frozen([rel_pos[r] for r in rel], np.int64)
        self.meta_relations: FrozenSet[MetaRelation] = frozenset(
            (node_types[s], r, node_types[t]) for s, t, r in zip(src, dst, rel)
        )
        self._in_adj: Optional[List[Dict[str, List[Tuple[str, int]]]]] = None

    # ------------------------------------------------------------------
    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_edges(self) -> int:
        return len(self.relations)

    @property
    def node_type_set(self) -> FrozenSet[str]:
        return frozenset(self.type_names)

    def node_type(self, node_id: str) -> str:
        return self.node_types[self.index[node_id]]

    def edges(self) -> List[Tuple[str, str, str]]:
        ids = self.node_ids
        return [(ids[s], ids[t], r) for s, t, r in zip(self.src, self.dst, self.relations)]

    def in_adjacency(self, node_id: str) -> Dict[str, List[Tuple[str, int]]]:
        """In-edges of ``node_id`` grouped by relation: ``{rel: [(src_id, edge_id)]}``."""
        if self._in_adj is None:
            adj: List[Dict[str, List[Tuple[str, int]]]] = [
                defaultdict(list) for _ in range(self.num_nodes)
            ]
            for k, (s, t, r) in enumerate(zip(self.src, self.dst, self.relations)):
                adj[t][r].append((self.node_ids[s], k))
            self._in_adj = [dict(a) for a in adj]
        return self._in_adj[self.index[node_id]]

    def in_degree(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.num_nodes)

    def nodes_of_type(self, node_type: str) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.node_types) == node_type)

    def __eq__(self, other) -> bool:
        if not isinstance(other, HetGraph):
            return NotImplemented
        return (
            self.node_ids == other.node_ids
            and self.node_types == other.node_types
            and self.relations == other.relations
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
        )

    def __repr__(self) -> str:
        return (
            f"HetGraph(num_nodes={self.num_nodes}, num_edges={self.num_edges}, "
            f"node_types={list(self.type_names)}, relations={list(self.relation_types)})"
        )


@dataclass(frozen=True)
class LabelTable:
    labels: Dict[str, int]
    num_classes: int
    task_name: str = "label"

    def __post_init__(self):
        if self.num_classes < 2:
            raise LabelError(f"num_classes must be >= 2, got {self.num_classes}")
        for nid, c in self.labels.items():
            if not 0 <= c < self.num_classes:
                raise LabelError(f"class {c} of node {nid!r} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def node_ids(self) -> List[str]:
        return sorted(self.labels)

    def validate_against(self, graph: HetGraph) -> None:
        missing = [n for n in self.labels if n not in graph.index]
        if missing:
            raise MissingNode(f"labelled node(s) not in graph: {missing[:5]}")


@dataclass(frozen=True)
class LabelSplit:
    train_ids: Tuple[str, ...]
    valid_ids: Tuple[str, ...]
    test_ids: Tuple[str, ...]

    def as_dict(self) -> Dict[str, Tuple[str, ...]]:
        return {"train": self.train_ids, "valid": self.valid_ids, "test": self.test_ids}


@dataclass(frozen=True)
class EmbeddingTable:
    vectors: Dict[str, np.ndarray] = field(default_factory=dict)
    dimension: int = 0

    def __len__(self) -> int:
        return len(self.vectors)


# ----------------------------------------------------------------------
# file ingestion


def _read_rows(path, ncols: Optional[int]) -> List[List[str]]:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if ncols is not None and len(parts) != ncols:
                raise MalformedLine(
                    f"{path}:{lineno}: expected {ncols} tab-separated columns, got {len(parts)}"
                )
            rows.append(parts)
    return rows


def load_graph(node_file, edge_file) -> HetGraph:
    """Read ``nodes.tsv`` (id, type) and ``edges.tsv`` (src, dst, relation)."""
    nodes = _read_rows(node_file, 2)
    if not nodes:
        raise EmptyGraph(f"{node_file} contains no nodes")
    edges = _read_rows(edge_file, 3)
    return HetGraph([n[0] for n in nodes], [n[1] for n in nodes], [tuple(e) for e in edges])


def write_graph(graph: HetGraph, node_file, edge_file) -> None:
    with open(node_file, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerows(zip(graph.node_ids, graph.node_types))
    with open(edge_file, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerows(graph.edges())


def load_labels(
    label_file,
    task: Optional[str] = None,
    num_classes: Optional[int] = None,
    graph: Optional[HetGraph] = None,
) -> LabelTable:
    """Read ``labels.tsv`` (node_id, task_name, class_index).

    When the file holds several tasks, ``task`` selects one.
    """
    rows = _read_rows(label_file, 3)
    tasks = sorted({r[1] for r in rows})
    if task is None:
        if len(tasks) > 1:
            raise LabelError(f"{label_file} holds tasks {tasks}; choose one")
        task = tasks[0] if tasks else "label"
    labels: Dict[str, int] = {}
    for nid, t, c in rows:
        if t != task:
            continue
        try:
            ci = int(c)
        except ValueError:
            raise MalformedLine(f"{label_file}: class index {c!r} is not an integer") from None
        if nid in labels:
            raise DuplicateId(f"node {nid!r} labelled twice for task {task!r}")
        labels[nid] = ci
    if num_classes is None:
        num_classes = max(max(labels.values(), default=0) + 1, 2)
    table = LabelTable(labels, num_classes, task)
    if graph is not None:
        table.validate_against(graph)
    return table


def write_labels(labels: LabelTable, label_file) -> None:
    with open(label_file, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for nid, c in labels.labels.items():
            w.writerow((nid, labels.task_name, c))


def load_embeddings(path, expected_dim: int, graph: Optional[HetGraph] = None) -> EmbeddingTable:
    """Read precomputed node vectors (``node_id<TAB>v1...vd``)."""
    vectors: Dict[str, np.ndarray] = {}
    for lineno, parts in enumerate(_read_rows(path, None), 1):
        if len(parts) < 2:
            raise MalformedLine(f"{path}:{lineno}: row has no vector")
        if len(parts) - 1 != expected_dim:
            raise DimensionMismatch(
                f"{path}:{lineno}: vector of dimension {len(parts) - 1}, expected {expected_dim}"
            )
        try:
            vec = np.array([float(x) for x in parts[1:]], dtype=np.float64)
        except ValueError:
            raise MalformedLine(f"{path}:{lineno}: non-numeric entry") from None
        if parts[0] in vectors:
            raise DuplicateId(f"{path}:{lineno}: duplicate id {parts[0]!r}")
        vectors[parts[0]] = vec
    if graph is not None:
        missing = [n for n in vectors if n not in graph.index]
        if missing:
            raise MissingNode(f"embedding ids not in graph: {missing[:5]}")
    return EmbeddingTable(vectors, expected_dim)


def write_embeddings(table: EmbeddingTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for nid, vec in table.vectors.items():
            fh.write("\t".join([nid, *(repr(float(x)) for x in vec)]) + "\n")


# ----------------------------------------------------------------------
# relation manipulation


def add_reverse_relations(graph: HetGraph) -> HetGraph:
    """Append an edge ``(t, s, r + "_rev")`` for every edge ``(s, t, r)``."""
    clash = [r for r in graph.relation_types if r.endswith(REVERSE_SUFFIX)]
    if clash:
        raise ReservedSuffixCollision(
            f"relations already carry the {REVERSE_SUFFIX!r} suffix: {clash}"
        )
    edges = graph.edges()
    edges += [(t, s, r + REVERSE_SUFFIX) for s, t, r in edges]
    return HetGraph(graph.node_ids, graph.node_types, edges)


def consolidate_relations(graph: HetGraph, mapping: Mapping[str, str]) -> HetGraph:
    """Rename relations via ``mapping``; relations not in the mapping are kept."""
    unknown = sorted(set(mapping) - set(graph.relation_types))
    if unknown:
        raise UnknownRelation(f"relations not present in graph: {unknown}")
    if not mapping:
        return graph
    edges = [(s, t, mapping.get(r, r)) for s, t, r in graph.edges()]
    return HetGraph(graph.node_ids, graph.node_types, edges)


def parse_consolidation(spec: str) -> Dict[str, str]:
    """Parse ``"click,purchase:interact"`` (optionally prefixed by ``consolidate=``).

    Several groups may be joined with ``;``.
    """
    spec = spec.strip()
    if spec.startswith("consolidate="):
        spec = spec[len("consolidate="):]
    mapping: Dict[str, str] = {}
    for group in filter(None, (g.strip() for g in spec.split(";"))):
        if group.count(":") != 1:
            raise ValueError(f"bad consolidation group {group!r}; expected 'r1,r2:target'")
        sources, target = group.split(":")
        names = [s.strip() for s in sources.split(",") if s.strip()]
        if not names or not target.strip():
            raise ValueError(f"bad consolidation group {group!r}")
        for name in names:
            mapping[name] = target.strip()
    return mapping


# ----------------------------------------------------------------------
# label splits


def _largest_remainder(n: int, ratios: Sequence[float]) -> List[int]:
    quotas = [n * r for r in ratios]
    sizes = [math.floor(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_labels(
    labels: LabelTable,
    ratios: Tuple[float, float, float] = (0.75, 0.125, 0.125),
    seed: int = 0,
) -> LabelSplit:
    """Shuffle the labelled ids with ``seed`` and cut them into train/valid/test."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must be three positive numbers summing to 1, got {ratios}")
    ids = labels.node_ids()
    if not ids:
        raise EmptyLabelSet("no labelled nodes to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train, n_valid, _ = _largest_remainder(len(ids), ratios)
    return LabelSplit(
        tuple(shuffled[:n_train]),
        tuple(shuffled[n_train:n_train + n_valid]),
        tuple(shuffled[n_train + n_valid:]),
    )
