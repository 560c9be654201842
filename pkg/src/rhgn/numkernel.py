"""Dense numeric kernels with reverse-mode differentiation.

Only the operations needed by the model are provided.  Every op eagerly
checks shapes (no implicit broadcasting), produces a new :class:`Tensor`
and records a closure that pushes the output gradient back to its inputs.
Calling :meth:`Tensor.backward` on a scalar walks the tape in reverse
topological order.

Segment reductions go through :class:`SegmentIndex`, whose sums reduce
each segment sequentially in row order, so results are deterministic for a
fixed edge layout.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.special import erf

from .exceptions import EmptySegment, NonDeterministicLoss, NonFiniteInput, ShapeMismatch

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """An array node on the autodiff tape."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, _parents=(), _backward=None):
        value = np.asarray(value)
        if value.dtype.kind != "f":
            value = value.astype(np.float64)
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward: Optional[Callable[[np.ndarray], None]] = _backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray, fresh: bool = False) -> None:
        # fresh=True: g was allocated by the caller and may be adopted as-is
        if self.grad is None:
            if fresh and g.dtype == self.value.dtype and g.shape == self.value.shape:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from this scalar.  Leaf gradients are reset first."""
        if self.value.size != 1:
            raise ShapeMismatch(f"backward() needs a scalar, got shape {self.shape}")
        order: List[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        for node in order:
            node.grad = np.zeros_like(node.value) if not node._parents else None
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


class Parameter(Tensor):
    """A named trainable leaf."""

    __slots__ = ("name",)

    def __init__(self, value, name: str = ""):
        super().__init__(np.array(value, copy=True), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _all_finite(value: np.ndarray) -> bool:
    # a single NaN/Inf makes the sum non-finite; only overflow gives false alarms
    return bool(np.isfinite(value.sum())) or bool(np.all(np.isfinite(value)))


def _out(value: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not _all_finite(value):
        raise NonFiniteInput("kernel produced a non-finite value")
    needs = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward if needs else None)


def _check_finite(x: Tensor, op: str) -> None:
    if not _all_finite(x.value):
        raise NonFiniteInput(f"{op}: input contains NaN or Inf")


# ----------------------------------------------------------------------
# elementary ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ bv.T, fresh=True)
        if b.requires_grad:
            b._accumulate(av.T @ g, fresh=True)

    return _out(av @ bv, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _out(a.value + b.value, (a, b), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``x`` of shape (n, m) and ``b`` of shape (m,)."""
    if x.value.ndim != 2 or b.value.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"add_bias: {x.shape} + {b.shape}")

    def backward(g):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _out(x.value + b.value, (x, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    def backward(g):
        x._accumulate(g * c, fresh=True)

    return _out(x.value * c, (x,), backward)


def mask_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Zero the rows of ``x`` where ``mask`` is False."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:1]:
        raise ShapeMismatch(f"mask_rows: mask {mask.shape} for rows of {x.shape}")
    m = mask.reshape((-1,) + (1,) * (x.value.ndim - 1)).astype(x.dtype)

    def backward(g):
        x._accumulate(g * m, fresh=True)

    return _out(x.value * m, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.value.size:
        raise ShapeMismatch(f"reshape: {x.shape} -> {shape}")
    old = x.shape

    def backward(g):
        x._accumulate(g.reshape(old))

    return _out(x.value.reshape(shape), (x,), backward)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(n, d) -> (n, heads, d // heads)."""
    n, d = x.shape
    if d % heads:
        raise ShapeMismatch(f"split_heads: dim {d} not divisible by {heads}")
    return reshape(x, (n, heads, d // heads))


def concat_heads(x: Tensor) -> Tensor:
    """(n, heads, k) -> (n, heads * k)."""
    n, h, k = x.shape
    return reshape(x, (n, h * k))


def gather_rows(x: Tensor, index) -> Tensor:
    """``x[index]``; ``index`` is an int array or a :class:`SegmentIndex`."""
    seg = index if isinstance(index, SegmentIndex) else SegmentIndex(index, x.shape[0])
    if seg.num_segments != x.shape[0]:
        raise ShapeMismatch(f"gather_rows: index over {seg.num_segments} rows, tensor has {x.shape[0]}")

    def backward(g):
        x._accumulate(seg.sum(g), fresh=True)

    return _out(x.value[seg.ids], (x,), backward)


def assemble_rows(parts: Sequence[Tensor], rows: Sequence[np.ndarray], n: int) -> Tensor:
    """Build an (n, ...) tensor with ``out[rows[k]] = parts[k]``.

    ``rows`` must partition ``range(n)``.
    """
    if len(parts) != len(rows):
        raise ShapeMismatch("assemble_rows: parts and rows differ in length")
    trailing = parts[0].shape[1:]
    covered = np.zeros(n, dtype=np.int64)
    for p, r in zip(parts, rows):
        if p.shape != (len(r),) + trailing:
            raise ShapeMismatch(f"assemble_rows: part {p.shape} for {len(r)} rows")
        covered[r] += 1
    if not np.all(covered == 1):
        raise ShapeMismatch("assemble_rows: rows do not partition the output")
    out = np.empty((n,) + trailing, dtype=np.result_type(*[p.dtype for p in parts]))
    for p, r in zip(parts, rows):
        out[r] = p.value

    def backward(g):
        for p, r in zip(parts, rows):
            if p.requires_grad:
                p._accumulate(g[r])

    return _out(out, tuple(parts), backward)


def grouped_affine(
    x: Tensor,
    groups: Sequence,
    weights: Sequence[Tensor],
    biases: Optional[Sequence[Optional[Tensor]]] = None,
) -> Tensor:
    """Apply a separate affine map per row group.

    ``out[groups[k]] = x[groups[k]] @ weights[k] + biases[k]``.  Groups are
    disjoint row slices or index arrays; rows in no group come out zero.
    Used both for per-node-type projections and for per-relation matrices
    (on head-split edge rows).
    """
    if x.value.ndim != 2:
        raise ShapeMismatch(f"grouped_affine: x must be 2-D, got {x.shape}")
    if len(groups) != len(weights):
        raise ShapeMismatch("grouped_affine: groups and weights differ in length")
    if biases is None:
        biases = [None] * len(weights)
    out_dim = None
    for w, b in zip(weights, biases):
        if w.value.ndim != 2 or w.shape[0] != x.shape[1]:
            raise ShapeMismatch(f"grouped_affine: weight {w.shape} for input {x.shape}")
        if out_dim is None:
            out_dim = w.shape[1]
        elif w.shape[1] != out_dim:
            raise ShapeMismatch("grouped_affine: weights disagree on output dim")
        if b is not None and b.shape != (w.shape[1],):
            raise ShapeMismatch(f"grouped_affine: bias {b.shape} for weight {w.shape}")
    xv = x.value
    covered = sum(_group_len(idx) for idx in groups)
    if covered == xv.shape[0]:
        out = np.empty((xv.shape[0], out_dim), dtype=xv.dtype)
    else:
        out = np.zeros((xv.shape[0], out_dim), dtype=xv.dtype)
    for idx, w, b in zip(groups, weights, biases):
        if _group_len(idx) == 0:
            continue
        y = xv[idx] @ w.value
        if b is not None:
            y += b.value
        out[idx] = y

    def backward(g):
        gx = None
        if x.requires_grad:
            gx = np.empty_like(xv) if covered == xv.shape[0] else np.zeros_like(xv)
        for idx, w, b in zip(groups, weights, biases):
            if _group_len(idx) == 0:
                continue
            gi = g[idx]
            if gx is not None:
                gx[idx] = gi @ w.value.T
            if w.requires_grad:
                w._accumulate(xv[idx].T @ gi, fresh=True)
            if b is not None and b.requires_grad:
                b._accumulate(gi.sum(axis=0))
        if gx is not None:
            x._accumulate(gx, fresh=True)

    parents = [x, *weights, *(b for b in biases if b is not None)]
    return _out(out, tuple(parents), backward)


def _group_len(idx) -> int:
    if isinstance(idx, slice):
        return len(range(*idx.indices(2 ** 62)))
    return len(idx)


def dot_last(a: Tensor, b: Tensor) -> Tensor:
    """Inner product over the last axis: (..., k) x (..., k) -> (...)."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"dot_last: {a.shape} vs {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        g = g[..., None]
        if a.requires_grad:
            a._accumulate(g * bv, fresh=True)
        if b.requires_grad:
            b._accumulate(g * av, fresh=True)

    return _out(np.einsum("...k,...k->...", av, bv), (a, b), backward)


def head_weight(alpha: Tensor, msg: Tensor) -> Tensor:
    """Scale each head slice: (E, h) x (E, h, k) -> (E, h, k)."""
    if msg.value.ndim != 3 or alpha.shape != msg.shape[:2]:
        raise ShapeMismatch(f"head_weight: alpha {alpha.shape} vs messages {msg.shape}")
    av, mv = alpha.value, msg.value

    def backward(g):
        if alpha.requires_grad:
            alpha._accumulate(np.einsum("ehk,ehk->eh", g, mv), fresh=True)
        if msg.requires_grad:
            msg._accumulate(g * av[..., None], fresh=True)

    return _out(mv * av[..., None], (alpha, msg), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with Phi via erf."""
    _check_finite(x, "gelu")
    xv = x.value
    cdf = 0.5 * (1.0 + erf(xv / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xv * xv)
        x._accumulate(g * (cdf + xv * pdf), fresh=True)

    return _out(xv * cdf, (x,), backward)


def gelu_scalar(x: float) -> float:
    if not math.isfinite(x):
        raise NonFiniteInput(f"gelu: non-finite input {x}")
    return x * 0.5 * (1.0 + math.erf(x / _SQRT2))


# ----------------------------------------------------------------------
# segment ops


class SegmentIndex:
    """Row -> segment assignment (e.g. edge -> target node).

    Sums are computed as a sparse (segments x rows) product, which reduces
    each segment sequentially in row order and is therefore deterministic.
    """

    def __init__(self, ids, num_segments: int):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ShapeMismatch("segment ids must be 1-D")
        if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
            raise ShapeMismatch(f"segment id out of range [0, {num_segments})")
        self.ids = ids
        self.num_segments = int(num_segments)
        self.counts = np.bincount(ids, minlength=num_segments)
        self._matrix = None
        self._order = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def matrix(self) -> sparse.csr_matrix:
        if self._matrix is None:
            n = len(self.ids)
            self._matrix = sparse.csr_matrix(
                (np.ones(n), (self.ids, np.arange(n))), shape=(self.num_segments, n)
            )
        return self._matrix

    def sum(self, x: np.ndarray) -> np.ndarray:
        if x.shape[0] != len(self.ids):
            raise ShapeMismatch(f"segment sum over {len(self.ids)} rows, got {x.shape[0]}")
        flat = x.reshape(len(self.ids), -1)
        out = self.matrix.astype(x.dtype, copy=False) @ flat
        return np.asarray(out).reshape((self.num_segments,) + x.shape[1:])

    def max(self, x: np.ndarray) -> np.ndarray:
        """Per-segment max; empty segments give -inf."""
        if self._order is None:
            order = np.argsort(self.ids, kind="stable")
            present = np.flatnonzero(self.counts)
            starts = np.concatenate(([0], np.cumsum(self.counts)[:-1]))[present]
            self._order = (order, present, starts)
        order, present, starts = self._order
        out = np.full((self.num_segments,) + x.shape[1:], -np.inf, dtype=x.dtype)
        if len(self.ids):
            out[present] = np.maximum.reduceat(x[order], starts, axis=0)
        return out


def _as_segments(segments, rows: int, num_segments: Optional[int]) -> SegmentIndex:
    if isinstance(segments, SegmentIndex):
        seg = segments
    else:
        if num_segments is None:
            raise ShapeMismatch("num_segments is required with a raw id array")
        seg = SegmentIndex(segments, num_segments)
    if len(seg) != rows:
        raise ShapeMismatch(f"segment index of length {len(seg)} for {rows} rows")
    return seg


def segment_softmax_values(logits: np.ndarray, segments, num_segments: Optional[int] = None,
                           require: Optional[np.ndarray] = None) -> np.ndarray:
    """Softmax of rows of ``logits`` within each segment (max-subtracted).

    ``require`` lists segment ids that must be non-empty.
    """
    seg = _as_segments(segments, logits.shape[0], num_segments)
    if require is not None:
        require = np.asarray(require, dtype=np.int64)
        empty = require[seg.counts[require] == 0]
        if empty.size:
            raise EmptySegment(f"segment(s) {empty[:5].tolist()} have no rows")
    ex = np.exp(logits - seg.max(logits)[seg.ids])
    return ex / seg.sum(ex)[seg.ids]


def segment_softmax(logits: Tensor, segments, num_segments: Optional[int] = None) -> Tensor:
    """Softmax over the rows sharing a segment id, per trailing column."""
    _check_finite(logits, "segment_softmax")
    seg = _as_segments(segments, logits.shape[0], num_segments)
    out = segment_softmax_values(logits.value, seg)

    def backward(g):
        s = seg.sum(g * out)
        logits._accumulate(out * (g - s[seg.ids]), fresh=True)

    return _out(out, (logits,), backward)


def segment_sum(x: Tensor, segments, num_segments: Optional[int] = None) -> Tensor:
    """Sum rows of ``x`` into their segments."""
    seg = _as_segments(segments, x.shape[0], num_segments)

    def backward(g):
        x._accumulate(g[seg.ids], fresh=True)

    return _out(seg.sum(x.value), (x,), backward)


# ----------------------------------------------------------------------
# softmax / loss


def log_softmax_values(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def row_softmax(x: Tensor) -> Tensor:
    if x.value.ndim != 2:
        raise ShapeMismatch(f"row_softmax: expected 2-D, got {x.shape}")
    out = np.exp(log_softmax_values(x.value))

    def backward(g):
        x._accumulate(out * (g - (g * out).sum(axis=1, keepdims=True)))

    return _out(out, (x,), backward)


def cross_entropy(logits: Tensor, rows: np.ndarray, targets: np.ndarray) -> Tensor:
    """Summed ``-log softmax(logits[rows])[targets]`` via log-sum-exp."""
    rows = np.asarray(rows, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.value.ndim != 2 or rows.shape != targets.shape or rows.ndim != 1:
        raise ShapeMismatch("cross_entropy: need 2-D logits and matching 1-D rows/targets")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ShapeMismatch("cross_entropy: target class out of range")
    _check_finite(logits, "cross_entropy")
    logp = log_softmax_values(logits.value[rows])
    picked = logp[np.arange(len(rows)), targets]
    loss = -picked.sum()

    def backward(g):
        grad_rows = np.exp(logp)
        grad_rows[np.arange(len(rows)), targets] -= 1.0
        full = np.zeros_like(logits.value)
        np.add.at(full, rows, grad_rows * g)
        logits._accumulate(full, fresh=True)

    return _out(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# ----------------------------------------------------------------------
# gradient checking


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn`` reads the current parameter values and returns a scalar
    :class:`Tensor` (or float).  Parameter values are perturbed in place and
    restored.  With ``max_entries`` set, each parameter is checked on a
    random subsample of at least ``min(size, max(max_entries, 50))`` entries.
    """
    params = list(params)

    def evaluate() -> float:
        out = loss_fn()
        return out.item() if isinstance(out, Tensor) else float(out)

    loss = loss_fn()
    if not isinstance(loss, Tensor):
        raise TypeError("loss_fn must return a Tensor for the analytic gradient")
    base = loss.item()
    for p in params:
        p.zero_grad()
    if loss.requires_grad:
        loss.backward()
    if evaluate() != base:
        raise NonDeterministicLoss("two evaluations at the same point disagree")
    analytic = {id(p): p.grad.copy() for p in params}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max(max_entries, 50):
            entries = rng.choice(n, size=max(max_entries, 50), replace=False)
        else:
            entries = range(n)
        ga = analytic[id(p)].reshape(-1)
        for j in entries:
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = evaluate()
            flat[j] = orig - eps
            f_minus = evaluate()
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(ga[j]), abs(numeric), 1e-8)
            worst = max(worst, abs(ga[j] - numeric) / denom)
    return worst
