"""Synthetic user/item/category graphs whose labels live only in purchase edges.

Each user has a latent class ``c``.  Purchases are drawn from items of
category ``c``; clicks are drawn uniformly from all items and carry no label
information.  A model must tell ``purchase`` from ``click`` to recover ``c``
cleanly.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .exceptions import BadConfig, NoPurchases
from .hetgraph import HetGraph, LabelTable


@dataclass(frozen=True)
class SynthConfig:
    num_users: int = 600
    num_items: int = 200
    num_categories: int = 4
    purchases_per_user: int = 6
    clicks_per_user: int = 12
    attr_per_item: int = 1
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if self.num_categories < 2:
            raise BadConfig(f"num_categories must be >= 2, got {self.num_categories}")
        if self.num_items < self.num_categories:
            raise BadConfig("num_items must be >= num_categories")
        if self.purchases_per_user < 1:
            raise BadConfig("purchases_per_user must be >= 1")
        if self.num_users < 1 or self.clicks_per_user < 0:
            raise BadConfig("num_users must be >= 1 and clicks_per_user >= 0")
        if not 1 <= self.attr_per_item <= self.num_categories:
            raise BadConfig("attr_per_item must lie in [1, num_categories]")
        return self


def _assign_categories(cfg: SynthConfig, rng: np.random.Generator) -> List[np.ndarray]:
    # redraw until every category owns at least one item
    while True:
        cats = [rng.choice(cfg.num_categories, size=cfg.attr_per_item, replace=False)
                for _ in range(cfg.num_items)]
        covered = np.zeros(cfg.num_categories, dtype=bool)
        for c in cats:
            covered[c] = True
        if covered.all():
            return cats


def generate(cfg: SynthConfig = SynthConfig()) -> Tuple[HetGraph, LabelTable]:
    """Build the graph and the user label table for ``cfg``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    users = [f"u{i}" for i in range(cfg.num_users)]
    items = [f"i{i}" for i in range(cfg.num_items)]
    cats = [f"c{i}" for i in range(cfg.num_categories)]

    item_cats = _assign_categories(cfg, rng)
    edges = []
    for item, cs in zip(items, item_cats):
        for c in sorted(cs):
            edges.append((item, cats[c], "has_attr"))
    by_category = [np.array([i for i, cs in enumerate(item_cats) if c in cs])
                   for c in range(cfg.num_categories)]

    labels = {}
    for user in users:
        c = int(rng.integers(cfg.num_categories))
        labels[user] = c
        pool = by_category[c]
        bought = rng.choice(pool, size=cfg.purchases_per_user,
                            replace=len(pool) < cfg.purchases_per_user)
        clicked = rng.choice(cfg.num_items, size=cfg.clicks_per_user,
                             replace=cfg.num_items < cfg.clicks_per_user)
        edges.extend((user, items[i], "purchase") for i in bought)
        edges.extend((user, items[i], "click") for i in clicked)

    node_ids = users + items + cats
    node_types = ["user"] * len(users) + ["item"] * len(items) + ["attr"] * len(cats)
    graph = HetGraph(node_ids, node_types, edges)
    return graph, LabelTable(labels, cfg.num_categories, "category")


def oracle_label(graph: HetGraph, user: str) -> int:
    """Majority category over the user's purchased items (ties -> lowest index).

    Category nodes are expected to be named ``c<k>``.
    """
    uid = graph.index[user]
    votes: Counter = Counter()
    out_edges = np.flatnonzero(np.asarray(graph.src) == uid)
    bought = [graph.dst[k] for k in out_edges if graph.relations[k] == "purchase"]
    if not bought:
        raise NoPurchases(f"user {user!r} has no purchase edges")
    item_attr = {}
    for s, t, r in zip(graph.src, graph.dst, graph.relations):
        if r == "has_attr":
            item_attr.setdefault(s, []).append(int(graph.node_ids[t][1:]))
    for item in bought:
        for c in item_attr.get(item, []):
            votes[c] += 1
    if not votes:
        raise NoPurchases(f"user {user!r}: purchased items carry no category")
    top = max(votes.values())
    return min(c for c, n in votes.items() if n == top)
