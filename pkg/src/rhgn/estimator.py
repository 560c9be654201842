"""scikit-learn style front end.

The classifier is transductive: it is fitted on one graph and predicts for
nodes of that graph (``X``), using a :class:`LabelTable` as ``y``.
"""
from __future__ import annotations

import contextlib
from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted
from threadpoolctl import threadpool_limits

from .checkpoint import read_checkpoint, restore_model, save_checkpoint, stored_split
from .exceptions import CheckpointError
from .hetgraph import (
    EmbeddingTable,
    HetGraph,
    LabelSplit,
    LabelTable,
    add_reverse_relations,
    consolidate_relations,
    split_labels,
)
from .model import AttentionRecord, forward, predict_classes
from .numkernel import log_softmax_values
from .training import MetricReport, TrainConfig, evaluate, train
from .validation import check_graph, check_labels, check_node_ids, check_split


def deterministic_context(enabled: bool):
    """Single-threaded BLAS when ``enabled`` (fixed reduction order)."""
    return threadpool_limits(limits=1) if enabled else contextlib.nullcontext()


class RHGNClassifier(ClassifierMixin, BaseEstimator):
    """Relation-aware heterogeneous graph network node classifier.

    Parameters mirror :class:`~rhgn.training.TrainConfig`.  ``ablation``
    maps relation names to merged names before training; ``add_reverse``
    adds a ``<rel>_rev`` edge for every edge so both endpoints receive
    messages.

    Attributes
    ----------
    model_ : ModelParams
    history_ : list of EpochRecord
    split_ : LabelSplit
    graph_ : HetGraph
        The prepared (consolidated, reversed) training graph.
    classes_ : ndarray
    """

    def __init__(
        self,
        d: int = 64,
        h: int = 8,
        L: int = 2,
        max_lr: float = 0.001,
        weight_decay: float = 0.01,
        batch_size=512,
        epochs: int = 200,
        seed: int = 0,
        pct_start: float = 0.3,
        div_factor: float = 25.0,
        final_div_factor: float = 1e4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        adam_eps: float = 1e-8,
        precision: str = "float64",
        deterministic: bool = False,
        split_ratios=(0.75, 0.125, 0.125),
        loss_reduction: str = "mean",
        share_projections: bool = False,
        scale_by_model_dim: bool = False,
        input_projection: bool = False,
        embedding_std: float = 0.01,
        ablation: Optional[dict] = None,
        add_reverse: bool = True,
    ):
        self.d = d
        self.h = h
        self.L = L
        self.max_lr = max_lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.pct_start = pct_start
        self.div_factor = div_factor
        self.final_div_factor = final_div_factor
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.precision = precision
        self.deterministic = deterministic
        self.split_ratios = split_ratios
        self.loss_reduction = loss_reduction
        self.share_projections = share_projections
        self.scale_by_model_dim = scale_by_model_dim
        self.input_projection = input_projection
        self.embedding_std = embedding_std
        self.ablation = ablation
        self.add_reverse = add_reverse

    def get_config(self) -> TrainConfig:
        params = self.get_params()
        params.pop("add_reverse")
        params["ablation"] = dict(params["ablation"] or {})
        params["split_ratios"] = tuple(params["split_ratios"])
        return TrainConfig(**params)

    @classmethod
    def from_config(cls, config: TrainConfig, add_reverse: bool = True) -> "RHGNClassifier":
        params = config.to_dict()
        params.pop("activation")
        params["split_ratios"] = tuple(params["split_ratios"])
        params["ablation"] = dict(params["ablation"]) or None
        return cls(add_reverse=add_reverse, **params)

    def prepare_graph(self, graph: HetGraph) -> HetGraph:
        graph = check_graph(graph)
        if self.ablation:
            graph = consolidate_relations(graph, self.ablation)
        if self.add_reverse:
            graph = add_reverse_relations(graph)
        return graph

    # ------------------------------------------------------------------
    def fit(self, graph: HetGraph, labels: LabelTable, split: Optional[LabelSplit] = None,
            pretrained: Optional[EmbeddingTable] = None) -> "RHGNClassifier":
        graph = check_graph(graph)
        labels = check_labels(labels, graph)
        config = self.get_config()
        if split is None:
            split = split_labels(labels, config.split_ratios, config.seed)
        split = check_split(split, labels)
        prepared = self.prepare_graph(graph)
        with deterministic_context(config.deterministic):
            model, history = train(config, prepared, labels, split, pretrained=pretrained)
        self.model_ = model
        self.history_ = history
        self.split_ = split
        self.graph_ = prepared
        self.task_ = labels.task_name
        self.classes_ = np.arange(labels.num_classes)
        return self

    def _graph_for(self, graph: Optional[HetGraph]) -> HetGraph:
        check_is_fitted(self, "model_")
        if graph is None or graph is self.graph_:
            return self.graph_
        prepared = self.prepare_graph(graph)
        if prepared.node_ids != self.graph_.node_ids or prepared.relation_types != self.graph_.relation_types:
            raise CheckpointError("graph differs from the one the model was fitted on")
        return prepared

    def decision_function(self, graph: Optional[HetGraph] = None, node_ids=None) -> np.ndarray:
        """Class logits for ``node_ids`` (all nodes when omitted)."""
        g = self._graph_for(graph)
        ids = check_node_ids(node_ids, g)
        with deterministic_context(self.deterministic):
            logits = forward(self.model_, g).logits.value
        return logits[[g.index[n] for n in ids]]

    def predict_proba(self, graph: Optional[HetGraph] = None, node_ids=None) -> np.ndarray:
        return np.exp(log_softmax_values(self.decision_function(graph, node_ids)))

    def predict(self, graph: Optional[HetGraph] = None, node_ids=None) -> np.ndarray:
        return predict_classes(self.decision_function(graph, node_ids))

    def score(self, graph: Optional[HetGraph], labels: LabelTable, node_ids=None) -> float:
        """Accuracy on ``node_ids`` (default: the held-out test split)."""
        return self.evaluate(graph, labels, node_ids).accuracy

    def evaluate(self, graph: Optional[HetGraph], labels: LabelTable, node_ids=None,
                 split: str = "") -> MetricReport:
        g = self._graph_for(graph)
        if node_ids is None:
            node_ids, split = self.split_.test_ids, split or "test"
        ids = check_node_ids(node_ids, g)
        with deterministic_context(self.deterministic):
            return evaluate(self.model_, g, labels, ids, split)

    def attention(self, graph: Optional[HetGraph] = None) -> List[AttentionRecord]:
        """Per-layer attention weights, aligned with the prepared graph's edges."""
        g = self._graph_for(graph)
        with deterministic_context(self.deterministic):
            return forward(self.model_, g, record_attention=True).attention

    # ------------------------------------------------------------------
    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, self.get_config(), self.graph_, self.split_,
                        task=self.task_)

    @classmethod
    def load(cls, path, graph: HetGraph) -> "RHGNClassifier":
        """Restore from a checkpoint; ``graph`` is the raw (unprepared) graph."""
        payload = read_checkpoint(path)
        config = TrainConfig.from_dict(payload["config"])
        est = cls.from_config(config)
        prepared = est.prepare_graph(graph)
        est.model_ = restore_model(payload, prepared)
        est.graph_ = prepared
        est.split_ = stored_split(payload)
        est.history_ = []
        est.task_ = payload.get("task", "label")
        est.classes_ = np.arange(payload["num_classes"])
        return est
