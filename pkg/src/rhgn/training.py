"""Semi-supervised training: loss, AdamW, one-cycle schedule and metrics."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import numkernel as nk
from .exceptions import (
    BadConfig,
    DivergedLoss,
    EmptyMask,
    EmptySplit,
    LabelError,
    LabelOutOfRange,
    NonFiniteInput,
    ShapeMismatch,
    StepOutOfRange,
)
from .hetgraph import EmbeddingTable, HetGraph, LabelSplit, LabelTable
from .model import GraphIndex, ModelParams, forward, init_params, predict_classes
from .numkernel import Parameter, Tensor

logger = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_loss", "valid_acc", "valid_macro_f1", "lr")


@dataclass
class TrainConfig:
    d: int = 64
    h: int = 8
    L: int = 2
    max_lr: float = 0.001
    weight_decay: float = 0.01
    batch_size: Union[int, str] = 512
    epochs: int = 200
    seed: int = 0
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    precision: str = "float64"
    deterministic: bool = False
    split_ratios: Tuple[float, float, float] = (0.75, 0.125, 0.125)
    loss_reduction: str = "mean"
    activation: str = "gelu"
    share_projections: bool = False
    scale_by_model_dim: bool = False
    input_projection: bool = False
    embedding_std: float = 0.01
    ablation: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> "TrainConfig":
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise BadConfig(f"epochs must be >= 1, got {self.epochs}")
        if not self.max_lr > 0:
            raise BadConfig(f"max_lr must be > 0, got {self.max_lr}")
        if not 0 < self.pct_start < 1:
            raise BadConfig(f"pct_start must lie in (0, 1), got {self.pct_start}")
        if self.div_factor <= 0 or self.final_div_factor <= 0:
            raise BadConfig("div_factor and final_div_factor must be positive")
        if self.batch_size != "full" and (not isinstance(self.batch_size, int) or self.batch_size < 1):
            raise BadConfig(f"batch_size must be a positive int or 'full', got {self.batch_size!r}")
        if self.d < 1 or self.h < 1 or self.d % self.h:
            raise BadConfig(f"d={self.d} must be a positive multiple of h={self.h}")
        if self.L < 1:
            raise BadConfig(f"L must be >= 1, got {self.L}")
        if self.precision not in ("float64", "float32"):
            raise BadConfig(f"precision must be float64 or float32, got {self.precision!r}")
        if self.loss_reduction not in ("mean", "sum"):
            raise BadConfig(f"loss_reduction must be mean or sum, got {self.loss_reduction!r}")
        if self.activation != "gelu":
            raise BadConfig("only the gelu activation is implemented")
        if self.weight_decay < 0:
            raise BadConfig("weight_decay must be >= 0")
        return self

    @property
    def dtype(self):
        if self.deterministic:
            return np.float64
        return np.float64 if self.precision == "float64" else np.float32

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["split_ratios"] = list(self.split_ratios)
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise BadConfig(f"unknown config key(s): {unknown}")
        data = dict(data)
        if "split_ratios" in data:
            data["split_ratios"] = tuple(data["split_ratios"])
        return cls(**data)


# ----------------------------------------------------------------------
# loss


def cross_entropy_loss(
    logits: Union[Tensor, np.ndarray],
    labels: LabelTable,
    node_mask: Sequence[str],
    graph: HetGraph,
) -> Tuple[Tensor, int]:
    """Summed cross-entropy over ``node_mask`` and the number of nodes summed."""
    logits = nk.as_tensor(logits)
    ids = list(node_mask)
    if not ids:
        raise EmptyMask("loss mask is empty")
    targets = []
    for nid in ids:
        if nid not in labels.labels:
            raise LabelError(f"node {nid!r} in loss mask has no label")
        c = labels.labels[nid]
        if not 0 <= c < logits.shape[1]:
            raise LabelOutOfRange(f"label {c} of {nid!r} outside [0, {logits.shape[1]})")
        targets.append(c)
    rows = np.array([graph.index[n] for n in ids], dtype=np.int64)
    return nk.cross_entropy(logits, rows, np.array(targets)), len(ids)


# ----------------------------------------------------------------------
# optimiser and schedule


@dataclass
class OptState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Parameter], beta1=0.9, beta2=0.999, eps=1e-8) -> "OptState":
        return cls({p.name: np.zeros_like(p.value) for p in params},
                   {p.name: np.zeros_like(p.value) for p in params}, 0, beta1, beta2, eps)


def _decays(p: Parameter) -> bool:
    return not p.name.startswith("emb/")


def adamw_step(params: Sequence[Parameter], opt: OptState, lr: float, weight_decay: float) -> OptState:
    """One decoupled-weight-decay Adam update, in place, using ``p.grad``.

    Embedding tables (names under ``emb/``) are not decayed.
    """
    if lr < 0:
        raise ValueError(f"negative learning rate {lr}")
    opt.t += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.t
    c2 = 1.0 - b2 ** opt.t
    for p in params:
        g = p.grad
        if g is None or g.shape != p.value.shape or opt.m[p.name].shape != p.value.shape:
            raise ShapeMismatch(f"gradient/state shape mismatch for {p.name}")
        m = opt.m[p.name]
        v = opt.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + opt.eps)
        if weight_decay and _decays(p):
            update = update + weight_decay * p.value
        p.value -= lr * update
    return opt


def one_cycle_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine warm-up from ``max_lr/div_factor`` to ``max_lr`` over the first
    ``floor(pct_start * total_steps)`` steps, then cosine decay to
    ``max_lr/final_div_factor`` at the last step."""
    if not 0 <= step < total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {total_steps})")
    peak = cfg.max_lr
    start = peak / cfg.div_factor
    end = peak / cfg.final_div_factor
    warm = math.floor(cfg.pct_start * total_steps)
    last = total_steps - 1

    def cos_anneal(a, b, pct):
        return b + (a - b) / 2.0 * (1.0 + math.cos(math.pi * pct))

    if step <= warm:
        if warm == 0:
            return peak
        return cos_anneal(start, peak, step / warm)
    return cos_anneal(peak, end, (step - warm) / (last - warm))


# ----------------------------------------------------------------------
# metrics


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, P: int) -> np.ndarray:
    cm = np.zeros((P, P), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def per_class_scores(cm: np.ndarray):
    """Precision, recall and F1 per class; 0/0 is taken as 0."""
    tp = np.diag(cm).astype(np.float64)
    pred_pos = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_pos > 0, tp / pred_pos, 0.0)
        recall = np.where(actual > 0, tp / actual, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return precision, recall, f1


def _aligned(pred_classes, labels, split_ids) -> Tuple[np.ndarray, np.ndarray]:
    ids = list(split_ids)
    if not ids:
        raise EmptySplit("split is empty")
    truth = labels.labels if isinstance(labels, LabelTable) else labels
    if isinstance(pred_classes, Mapping):
        pred = [pred_classes[n] for n in ids]
    else:
        pred = list(pred_classes)
        if len(pred) != len(ids):
            raise ShapeMismatch("predictions not aligned with split ids")
    return np.array([truth[n] for n in ids], dtype=np.int64), np.array(pred, dtype=np.int64)


def accuracy(pred_classes, labels, split_ids) -> float:
    """Fraction of ``split_ids`` whose prediction equals the label.

    ``pred_classes`` is a mapping node-id -> class or a sequence aligned
    with ``split_ids``.
    """
    y, p = _aligned(pred_classes, labels, split_ids)
    return float(np.mean(y == p))


def macro_f1(pred_classes, labels, split_ids, P: int) -> float:
    """Unweighted mean F1 over all ``P`` classes, absent classes included."""
    y, p = _aligned(pred_classes, labels, split_ids)
    _, _, f1 = per_class_scores(confusion_matrix(y, p, P))
    return float(f1.mean())


@dataclass
class MetricReport:
    split: str
    accuracy: float
    macro_f1: float
    precision: List[float]
    recall: List[float]
    f1: List[float]
    support: List[int]

    @property
    def count(self) -> int:
        return int(sum(self.support))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def metric_report(y_true: np.ndarray, y_pred: np.ndarray, P: int, split: str = "") -> MetricReport:
    if len(y_true) == 0:
        raise EmptySplit(f"split {split!r} is empty")
    cm = confusion_matrix(y_true, y_pred, P)
    precision, recall, f1 = per_class_scores(cm)
    return MetricReport(
        split=split,
        accuracy=float(np.trace(cm) / cm.sum()),
        macro_f1=float(f1.mean()),
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        support=cm.sum(axis=1).tolist(),
    )


def evaluate(model: ModelParams, graph: HetGraph, labels: LabelTable, split_ids,
             split: str = "", index: Optional[GraphIndex] = None) -> MetricReport:
    """Forward once, take the argmax class and score it on ``split_ids``."""
    ids = list(split_ids)
    if not ids:
        raise EmptySplit(f"split {split!r} is empty")
    logits = forward(model, graph, index=index).logits.value
    pred = predict_classes(logits)
    rows = np.array([graph.index[n] for n in ids])
    y = np.array([labels.labels[n] for n in ids])
    return metric_report(y, pred[rows], labels.num_classes, split)


# ----------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_acc: float
    valid_macro_f1: float
    lr: float


def write_history(history: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.valid_acc), repr(r.valid_macro_f1), repr(r.lr)])


def _snapshot(model: ModelParams) -> Dict[str, np.ndarray]:
    return {p.name: p.value.copy() for p in model.parameters()}


def _restore(model: ModelParams, snap: Dict[str, np.ndarray]) -> None:
    for p in model.parameters():
        p.value = snap[p.name].copy()


def build_model(config: TrainConfig, graph: HetGraph, num_classes: int,
                pretrained: Optional[EmbeddingTable] = None) -> ModelParams:
    model = init_params(
        graph, config.d, config.h, config.L, num_classes, seed=config.seed,
        pretrained=pretrained, share_projections=config.share_projections,
        input_projection=config.input_projection, embedding_std=config.embedding_std,
        scale_by_model_dim=config.scale_by_model_dim,
    )
    return model.astype(config.dtype)


def train(
    config: TrainConfig,
    graph: HetGraph,
    labels: LabelTable,
    split: LabelSplit,
    pretrained: Optional[EmbeddingTable] = None,
    model: Optional[ModelParams] = None,
) -> Tuple[ModelParams, List[EpochRecord]]:
    """Fit the model on ``split.train_ids``; keep the best-validation-Macro-F1 weights.

    Each step runs the full-graph forward and masks the loss to one batch of
    training nodes.  ``graph`` must already contain its reverse relations.
    """
    config.validate()
    if not split.train_ids:
        raise EmptySplit("no training nodes")
    if model is None:
        model = build_model(config, graph, labels.num_classes, pretrained)
    params = model.parameters()
    index = GraphIndex(graph, model, model.h)
    opt = OptState.for_params(params, config.beta1, config.beta2, config.adam_eps)

    train_ids = list(split.train_ids)
    batch = len(train_ids) if config.batch_size == "full" else min(config.batch_size, len(train_ids))
    steps_per_epoch = math.ceil(len(train_ids) / batch)
    total_steps = steps_per_epoch * config.epochs
    rng = np.random.default_rng(config.seed + 1)

    history: List[EpochRecord] = []
    best_f1 = -1.0
    best = _snapshot(model)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_ids))
        losses = []
        lr = 0.0
        for b in range(steps_per_epoch):
            ids = [train_ids[i] for i in order[b * batch:(b + 1) * batch]]
            for p in params:
                p.zero_grad()
            try:
                logits = forward(model, graph, index=index).logits
                loss_sum, count = cross_entropy_loss(logits, labels, ids, graph)
                objective = nk.scale(loss_sum, 1.0 / count) if config.loss_reduction == "mean" else loss_sum
                objective.backward()
            except NonFiniteInput as exc:
                raise DivergedLoss(f"non-finite values at epoch {epoch}, step {step} (lr={lr:.3g}): {exc}") from exc
            value = objective.item()
            if not math.isfinite(value):
                raise DivergedLoss(f"loss became {value} at epoch {epoch}, step {step}")
            lr = one_cycle_lr(step, total_steps, config)
            adamw_step(params, opt, lr, config.weight_decay)
            losses.append(loss_sum.item() / count)
            step += 1
        if split.valid_ids:
            rep = evaluate(model, graph, labels, split.valid_ids, "valid", index=index)
            valid_acc, valid_f1 = rep.accuracy, rep.macro_f1
        else:
            valid_acc = valid_f1 = float("nan")
        history.append(EpochRecord(epoch, float(np.mean(losses)), valid_acc, valid_f1, lr))
        logger.debug("epoch %d loss %.5f valid acc %.4f f1 %.4f", epoch, history[-1].train_loss,
                     valid_acc, valid_f1)
        if not split.valid_ids or valid_f1 > best_f1:
            best_f1 = valid_f1 if split.valid_ids else best_f1
            best = _snapshot(model)
    _restore(model, best)
    return model, history
