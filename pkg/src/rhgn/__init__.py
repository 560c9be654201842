"""Relation-aware heterogeneous graph network for node classification."""
from .estimator import RHGNClassifier
from .hetgraph import (
    EmbeddingTable,
    HetGraph,
    LabelSplit,
    LabelTable,
    add_reverse_relations,
    consolidate_relations,
    load_embeddings,
    load_graph,
    load_labels,
    split_labels,
)
from .model import ModelParams, forward, init_params
from .synthdata import SynthConfig, generate, oracle_label
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "EmbeddingTable",
    "HetGraph",
    "LabelSplit",
    "LabelTable",
    "ModelParams",
    "RHGNClassifier",
    "SynthConfig",
    "TrainConfig",
    "add_reverse_relations",
    "consolidate_relations",
    "evaluate",
    "forward",
    "generate",
    "init_params",
    "load_embeddings",
    "load_graph",
    "load_labels",
    "oracle_label",
    "split_labels",
    "train",
]
