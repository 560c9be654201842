"""Versioned JSON checkpoints.

Layout::

    {"format": "RHGN1", "config": {...}, "num_classes": P, "task": str,
     "graph": {"node_ids": [...], "relations": [...]},
     "split": {"train": [...], "valid": [...], "test": [...]},
     "params": {name: {"shape": [...], "values": [...]}},
     "optimizer": {...} | null}

Floats are written with ``repr`` precision, so values round-trip exactly.
"""
from __future__ import annotations

import json
from typing import Optional

import numpy as np

from .exceptions import CheckpointError
from .hetgraph import HetGraph, LabelSplit
from .model import ModelParams
from .training import OptState, TrainConfig, build_model

MAGIC = "RHGN1"


def save_checkpoint(
    path,
    model: ModelParams,
    config: TrainConfig,
    graph: HetGraph,
    split: Optional[LabelSplit] = None,
    task: str = "label",
    opt: Optional[OptState] = None,
) -> None:
    payload = {
        "format": MAGIC,
        "config": config.to_dict(),
        "num_classes": model.num_classes,
        "task": task,
        "graph": {"node_ids": list(graph.node_ids), "relations": list(graph.relation_types)},
        "split": None if split is None else {k: list(v) for k, v in split.as_dict().items()},
        "params": {
            p.name: {"shape": list(p.shape), "values": p.value.astype(np.float64).ravel().tolist()}
            for p in model.parameters()
        },
        "optimizer": None if opt is None else {
            "t": opt.t,
            "m": {k: v.ravel().tolist() for k, v in opt.m.items()},
            "v": {k: v.ravel().tolist() for k, v in opt.v.items()},
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)


def read_checkpoint(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not a checkpoint ({exc})") from None
    if not isinstance(payload, dict) or payload.get("format") != MAGIC:
        raise CheckpointError(f"{path}: missing {MAGIC!r} format marker")
    return payload


def restore_model(payload: dict, graph: HetGraph) -> ModelParams:
    """Rebuild the parameters stored in ``payload`` for ``graph``.

    ``graph`` must be the prepared graph the checkpoint was trained on.
    """
    meta = payload["graph"]
    if list(graph.node_ids) != meta["node_ids"]:
        raise CheckpointError("checkpoint node ids do not match the graph")
    if list(graph.relation_types) != meta["relations"]:
        raise CheckpointError(
            f"checkpoint relations {meta['relations']} do not match graph {list(graph.relation_types)}"
        )
    config = TrainConfig.from_dict(payload["config"])
    model = build_model(config, graph, payload["num_classes"])
    stored = payload["params"]
    named = model.named_parameters()
    if set(stored) != set(named):
        diff = sorted(set(stored) ^ set(named))
        raise CheckpointError(f"parameter sets differ: {diff[:5]}")
    for name, p in named.items():
        shape = tuple(stored[name]["shape"])
        if shape != p.shape:
            raise CheckpointError(f"{name}: stored shape {shape}, model expects {p.shape}")
        p.value = np.asarray(stored[name]["values"], dtype=p.dtype).reshape(shape)
    return model


def stored_split(payload: dict) -> Optional[LabelSplit]:
    s = payload.get("split")
    if s is None:
        return None
    return LabelSplit(tuple(s["train"]), tuple(s["valid"]), tuple(s["test"]))
