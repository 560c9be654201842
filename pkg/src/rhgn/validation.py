"""Input validation helpers shared by the estimator and the CLI."""
from __future__ import annotations

from typing import Iterable, List, Optional

from .exceptions import EmptyGraph, EmptySplit, UnknownNodeId
from .hetgraph import HetGraph, LabelSplit, LabelTable


def check_graph(graph) -> HetGraph:
    if not isinstance(graph, HetGraph):
        raise TypeError(f"expected a HetGraph, got {type(graph).__name__}")
    if graph.num_nodes == 0:
        raise EmptyGraph("graph has no nodes")
    return graph


def check_labels(labels, graph: HetGraph) -> LabelTable:
    if not isinstance(labels, LabelTable):
        raise TypeError(f"expected a LabelTable, got {type(labels).__name__}")
    labels.validate_against(graph)
    return labels


def check_node_ids(node_ids: Optional[Iterable[str]], graph: HetGraph) -> List[str]:
    """Materialise ``node_ids`` (all nodes when None) and reject unknown ids."""
    if node_ids is None:
        return list(graph.node_ids)
    if isinstance(node_ids, str):
        node_ids = [node_ids]
    ids = list(node_ids)
    unknown = [n for n in ids if n not in graph.index]
    if unknown:
        raise UnknownNodeId(f"node id(s) not in graph: {unknown[:5]}")
    return ids


def check_split(split: LabelSplit, labels: LabelTable) -> LabelSplit:
    parts = [set(split.train_ids), set(split.valid_ids), set(split.test_ids)]
    if not parts[0]:
        raise EmptySplit("training split is empty")
    if parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2]:
        raise ValueError("train/valid/test splits overlap")
    unlabeled = (parts[0] | parts[1] | parts[2]) - set(labels.labels)
    if unlabeled:
        raise ValueError(f"split contains unlabelled nodes: {sorted(unlabeled)[:5]}")
    return split
