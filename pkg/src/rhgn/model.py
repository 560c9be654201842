"""Relation-aware heterogeneous graph network: parameters and forward pass.

One layer computes, for every edge ``e = (s, t)`` with relation ``r``:

* a message: the source state projected by the source type's message map,
  split into heads, each head multiplied by the relation matrix ``W_MSG[r]``;
* an attention logit per head: ``K(s) W_ATT[r] Q(t)^T / sqrt(d_k)``,
  normalised jointly over all in-edges of ``t``;

and updates ``H'[t] = F_map(GELU(sum_e alpha_e * msg_e)) + H[t]`` for nodes
with at least one in-edge (others keep their state).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numkernel as nk
from .exceptions import BadDims, DimMismatch, ShapeMismatch, UnknownRelationParams
from .hetgraph import EmbeddingTable, HetGraph
from .numkernel import Parameter, Tensor

SHARED = "*"


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class RHGNLayerParams:
    """Learnable maps of one layer.

    Projection dicts are keyed by node type (or ``"*"`` when projections are
    shared); relation dicts by relation name.
    """

    d: int
    h: int
    msg_w: Dict[str, Parameter]
    msg_b: Dict[str, Parameter]
    key_w: Dict[str, Parameter]
    key_b: Dict[str, Parameter]
    query_w: Dict[str, Parameter]
    query_b: Dict[str, Parameter]
    map_w: Dict[str, Parameter]
    map_b: Dict[str, Parameter]
    w_msg: Dict[str, Parameter]
    w_att: Dict[str, Parameter]

    @property
    def head_dim(self) -> int:
        return self.d // self.h

    @property
    def shared(self) -> bool:
        return SHARED in self.msg_w

    def parameters(self) -> List[Parameter]:
        out: List[Parameter] = []
        for table in (self.msg_w, self.msg_b, self.key_w, self.key_b, self.query_w,
                      self.query_b, self.map_w, self.map_b, self.w_msg, self.w_att):
            out.extend(table[k] for k in sorted(table))
        return out


@dataclass
class ModelParams:
    """Input embeddings, ``L`` layers and the linear classifier."""

    d: int
    h: int
    num_classes: int
    node_types: Tuple[str, ...]
    relations: Tuple[str, ...]
    embeddings: Dict[str, Parameter]
    layers: List[RHGNLayerParams]
    out_w: Parameter
    out_b: Parameter
    input_proj: Dict[str, Parameter] = field(default_factory=dict)
    scale_by_model_dim: bool = False

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def parameters(self) -> List[Parameter]:
        out = [self.embeddings[t] for t in sorted(self.embeddings)]
        out += [self.input_proj[t] for t in sorted(self.input_proj)]
        for layer in self.layers:
            out += layer.parameters()
        return out + [self.out_w, self.out_b]

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def astype(self, dtype) -> "ModelParams":
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        return self


def init_params(
    graph: HetGraph,
    d: int,
    h: int,
    L: int,
    P: int,
    seed: int = 0,
    pretrained: Optional[EmbeddingTable] = None,
    share_projections: bool = False,
    input_projection: bool = False,
    embedding_std: float = 0.01,
    scale_by_model_dim: bool = False,
) -> ModelParams:
    """Initialise all parameters for ``graph``.

    Linear maps are Xavier-uniform, relation matrices are identity plus
    U(-0.01, 0.01) noise, biases are zero and embeddings are normal with
    ``embedding_std``.  Nodes present in ``pretrained`` start from their
    pretrained vector; with ``input_projection`` the pretrained types keep
    their native width and get a learned map to ``d``.
    """
    if d <= 0 or h <= 0 or d % h:
        raise BadDims(f"hidden dim {d} must be a positive multiple of heads {h}")
    if L < 1:
        raise BadDims(f"need at least one layer, got {L}")
    if P < 2:
        raise BadDims(f"need at least two classes, got {P}")
    if pretrained is not None and len(pretrained) and pretrained.dimension != d and not input_projection:
        raise DimMismatch(
            f"pretrained dimension {pretrained.dimension} != hidden dim {d}; "
            "enable input_projection to learn a map"
        )

    rng = np.random.default_rng(seed)
    types = graph.type_names
    relations = graph.relation_types
    dk = d // h

    pre_types = set()
    if pretrained is not None and len(pretrained):
        pre_types = {graph.node_type(n) for n in pretrained.vectors}

    embeddings: Dict[str, Parameter] = {}
    input_proj: Dict[str, Parameter] = {}
    for t in types:
        rows = graph.nodes_of_type(t)
        width = pretrained.dimension if (t in pre_types and input_projection) else d
        table = rng.normal(0.0, embedding_std, size=(len(rows), width))
        if t in pre_types:
            for j, r in enumerate(rows):
                vec = pretrained.vectors.get(graph.node_ids[r])
                if vec is not None:
                    table[j] = vec
            if input_projection:
                input_proj[t] = Parameter(xavier_uniform(rng, width, d), f"input_proj/type:{t}/W")
        embeddings[t] = Parameter(table, f"emb/{t}")

    proj_keys = [SHARED] if share_projections else list(types)
    layers = []
    for l in range(L):
        def linear(kind):
            ws, bs = {}, {}
            for k in proj_keys:
                tag = "shared" if k == SHARED else f"type:{k}"
                ws[k] = Parameter(xavier_uniform(rng, d, d), f"layer{l}/{tag}/{kind}/W")
                bs[k] = Parameter(np.zeros(d), f"layer{l}/{tag}/{kind}/b")
            return ws, bs

        msg_w, msg_b = linear("F_M")
        key_w, key_b = linear("F_K")
        query_w, query_b = linear("F_Q")
        map_w, map_b = linear("F_map")
        w_msg, w_att = {}, {}
        for r in relations:
            w_msg[r] = Parameter(np.eye(dk) + rng.uniform(-0.01, 0.01, (dk, dk)), f"layer{l}/rel:{r}/W_MSG")
            w_att[r] = Parameter(np.eye(dk) + rng.uniform(-0.01, 0.01, (dk, dk)), f"layer{l}/rel:{r}/W_ATT")
        layers.append(RHGNLayerParams(d, h, msg_w, msg_b, key_w, key_b, query_w, query_b,
                                      map_w, map_b, w_msg, w_att))

    out_w = Parameter(xavier_uniform(rng, d, P), "out/W")
    out_b = Parameter(np.zeros(P), "out/b")
    return ModelParams(d, h, P, tuple(types), tuple(relations), embeddings, layers,
                       out_w, out_b, input_proj, scale_by_model_dim)


# ----------------------------------------------------------------------
# forward


@dataclass
class AttentionRecord:
    """Normalised attention of one layer, aligned with the graph's edge ids."""

    layer: int
    src: np.ndarray
    dst: np.ndarray
    relation: Tuple[str, ...]
    alpha: np.ndarray  # (E, h)

    def rows(self, graph: HetGraph):
        ids = graph.node_ids
        for k in range(len(self.src)):
            yield {
                "layer": self.layer,
                "src": ids[self.src[k]],
                "dst": ids[self.dst[k]],
                "relation": self.relation[k],
                "alpha": [float(a) for a in self.alpha[k]],
            }


@dataclass
class ForwardResult:
    states: List[Tensor]
    attention: List[AttentionRecord]
    logits: Tensor

    @property
    def final_states(self) -> Tensor:
        return self.states[-1]


class GraphIndex:
    """Edge layout and row groupings of a graph, shared by every layer.

    Edges are stored sorted by relation (stable), so each relation's
    head-split rows form one contiguous slice.  ``order[k]`` is the graph
    edge id of internal edge ``k``.
    """

    def __init__(self, graph: HetGraph, model: ModelParams, heads: int):
        self.graph = graph
        self.n = graph.num_nodes
        missing_types = set(graph.type_names) - set(model.node_types)
        if missing_types:
            raise DimMismatch(f"node types without parameters: {sorted(missing_types)}")
        missing = sorted(set(graph.relation_types) - set(model.relations))
        if missing:
            raise UnknownRelationParams(f"relations without parameters: {missing}")
        self.type_rows = {t: graph.nodes_of_type(t) for t in model.node_types}
        self.has_in = graph.in_degree() > 0

        rel_pos = {r: i for i, r in enumerate(model.relations)}
        codes = np.array([rel_pos[r] for r in graph.relations], dtype=np.int64)
        self.order = np.argsort(codes, kind="stable")
        self.src = np.asarray(graph.src)[self.order]
        self.dst = np.asarray(graph.dst)[self.order]
        self.src_seg = nk.SegmentIndex(self.src, self.n)
        self.dst_seg = nk.SegmentIndex(self.dst, self.n)
        bounds = np.searchsorted(codes[self.order], np.arange(len(model.relations) + 1))
        self.rel_rows = {
            r: slice(int(bounds[i]) * heads, int(bounds[i + 1]) * heads)
            for i, r in enumerate(model.relations)
        }

    def to_graph_order(self, edge_values: np.ndarray) -> np.ndarray:
        out = np.empty_like(edge_values)
        out[self.order] = edge_values
        return out


def _project(x: Tensor, index: GraphIndex, ws: Dict[str, Parameter], bs: Dict[str, Parameter]) -> Tensor:
    if SHARED in ws:
        groups = [np.arange(index.n)]
        keys = [SHARED]
    else:
        keys = sorted(index.type_rows)
        groups = [index.type_rows[k] for k in keys]
    return nk.grouped_affine(x, groups, [ws[k] for k in keys], [bs[k] for k in keys])


def _relation_map(x: Tensor, index: GraphIndex, mats: Dict[str, Parameter]) -> Tensor:
    """Per-edge, per-head ``x[e, i] @ mats[rel(e)]`` on (E, h, k)."""
    E, h, k = x.shape
    keys = sorted(index.rel_rows)
    flat = nk.reshape(x, (E * h, k))
    out = nk.grouped_affine(flat, [index.rel_rows[r] for r in keys], [mats[r] for r in keys])
    return nk.reshape(out, (E, h, k))


def compute_messages(layer: RHGNLayerParams, index: GraphIndex, states: Tensor) -> Tensor:
    """Per-edge messages, shape (E, h, d/h), in ``index`` edge order."""
    projected = _project(states, index, layer.msg_w, layer.msg_b)
    per_edge = nk.split_heads(nk.gather_rows(projected, index.src_seg), layer.h)
    return _relation_map(per_edge, index, layer.w_msg)


def attention_logits(layer: RHGNLayerParams, index: GraphIndex, states: Tensor,
                     scale_by_model_dim: bool = False) -> Tensor:
    keys = _project(states, index, layer.key_w, layer.key_b)
    queries = _project(states, index, layer.query_w, layer.query_b)
    k_edge = _relation_map(nk.split_heads(nk.gather_rows(keys, index.src_seg), layer.h), index, layer.w_att)
    q_edge = nk.split_heads(nk.gather_rows(queries, index.dst_seg), layer.h)
    width = layer.d if scale_by_model_dim else layer.head_dim
    return nk.scale(nk.dot_last(k_edge, q_edge), 1.0 / math.sqrt(width))


def compute_attention(layer: RHGNLayerParams, index: GraphIndex, states: Tensor,
                      scale_by_model_dim: bool = False) -> Tensor:
    """Attention weights (E, h), softmax over each target's full in-neighbourhood."""
    logits = attention_logits(layer, index, states, scale_by_model_dim)
    return nk.segment_softmax(logits, index.dst_seg)


def aggregate_update(layer: RHGNLayerParams, index: GraphIndex, states: Tensor,
                     messages: Tensor, alpha: Tensor) -> Tensor:
    """Residual target update; nodes without in-edges pass through unchanged."""
    if messages.shape[:2] != alpha.shape or messages.shape[0] != len(index.src):
        raise ShapeMismatch(f"messages {messages.shape} vs attention {alpha.shape}")
    pooled = nk.segment_sum(nk.head_weight(alpha, messages), index.dst_seg)
    mapped = _project(nk.gelu(nk.concat_heads(pooled)), index, layer.map_w, layer.map_b)
    return nk.add(nk.mask_rows(mapped, index.has_in), states)


def input_states(model: ModelParams, index: GraphIndex) -> Tensor:
    keys = sorted(model.embeddings)
    parts = []
    for t in keys:
        emb = model.embeddings[t]
        if t in model.input_proj:
            emb = nk.matmul(emb, model.input_proj[t])
        parts.append(emb)
    return nk.assemble_rows(parts, [index.type_rows[t] for t in keys], index.n)


def forward(model: ModelParams, graph: HetGraph, record_attention: bool = False,
            index: Optional[GraphIndex] = None) -> ForwardResult:
    """Run all layers and the classifier; logits cover every node."""
    if index is None:
        index = GraphIndex(graph, model, model.h)
    h = input_states(model, index)
    states = [h]
    records: List[AttentionRecord] = []
    for l, layer in enumerate(model.layers):
        messages = compute_messages(layer, index, h)
        alpha = compute_attention(layer, index, h, model.scale_by_model_dim)
        if record_attention:
            records.append(AttentionRecord(l, np.asarray(graph.src), np.asarray(graph.dst),
                                           graph.relations, index.to_graph_order(alpha.value)))
        h = aggregate_update(layer, index, h, messages, alpha)
        states.append(h)
    logits = nk.add_bias(nk.matmul(h, model.out_w), model.out_b)
    return ForwardResult(states, records, logits)


def predict_classes(logits: np.ndarray) -> np.ndarray:
    """Row argmax; ties go to the lowest class index."""
    return np.argmax(logits, axis=1)
