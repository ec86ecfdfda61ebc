"""Tape-based reverse-mode differentiation over numpy arrays.

Tensors carry up to three axes (batch, rows, channels). Every primitive
checks shapes, records one entry on the active :class:`Tape`, and owns an
exact analytic backward. Nondifferentiable primitives (relu, leaky relu,
max pooling) also record their activation pattern so :func:`grad_check`
can skip coordinates whose finite-difference stencil straddles a kink.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "DiffError",
    "Tensor",
    "Tape",
    "ParamStore",
    "constant",
    "backward",
    "grad_check",
    "GradCheckResult",
    "matmul",
    "add",
    "add_bias",
    "sub",
    "mul",
    "div",
    "scale",
    "relu",
    "leaky_relu",
    "layer_norm",
    "softmax_rows",
    "segment_softmax",
    "segment_sum",
    "edge_aggregate",
    "EdgeHeads",
    "scaled_dot_attention",
    "concat_channels",
    "slice_channels",
    "elementwise_mul",
    "gather_rows",
    "embedding",
    "scatter_max",
    "broadcast_rows",
    "split_heads",
    "merge_heads",
    "transpose",
    "head_dot",
    "head_repeat",
    "group_softmax",
    "sparse_matmul",
    "sum",
    "mean",
    "reshape",
]


class DiffError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        if self.value.ndim > 3:
            raise DiffError(f"tensors carry at most 3 axes, got shape {self.value.shape}")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def constant(value, dtype=None) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


class Tape:
    """Ordered record of one forward pass.

    Use as a context manager; primitives evaluated inside record themselves
    when any input requires a gradient.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self.patterns: list[np.ndarray] = []
        self.used = False

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _record(out: Tensor, inputs: Sequence[Tensor], fn: Callable[[np.ndarray], None]) -> Tensor:
    tape = Tape.active()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.entries.append((out, fn))
    return out


def _pattern(arr: np.ndarray) -> None:
    tape = Tape.active()
    if tape is not None:
        tape.patterns.append(arr)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.value.shape:
        g = _unbroadcast(g, t.value.shape)
    # out-of-place: incoming buffers may be shared between several inputs
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss) back through ``tape`` in reverse recording order."""
    if not tape.entries:
        raise DiffError("backward called on an empty tape")
    if tape.used:
        raise DiffError("tape already consumed; record a new forward pass")
    if loss.value.size != 1:
        raise DiffError(f"loss must be a scalar, got shape {loss.shape}")
    if tape.entries[-1][0] is not loss and not any(out is loss for out, _ in tape.entries):
        raise DiffError("loss was not produced on this tape")
    tape.used = True
    loss.grad = np.ones_like(loss.value)
    for out, fn in reversed(tape.entries):
        if out.grad is not None:
            fn(out.grad)
    # release intermediate buffers
    for out, _ in tape.entries:
        out.grad = None if out is not loss else out.grad


def _check(cond: bool, op: str, *shapes) -> None:
    if not cond:
        raise DiffError(f"{op}: incompatible shapes " + " and ".join(str(s) for s in shapes))


# ---------------------------------------------------------------- primitives


ROW_TILE = 32


def _rowwise_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w`` for 2-D ``w`` whose rows do not depend on their position.

    BLAS uses different kernels for the tail rows that do not fill a tile, so a
    row can round differently after a permutation. Padding the flattened rows
    to a tile multiple puts every row through the same kernel.
    """
    k = x.shape[-1]
    flat = x.reshape(-1, k)
    pad = (-flat.shape[0]) % ROW_TILE
    if pad:
        flat = np.concatenate([flat, np.zeros((pad, k), dtype=flat.dtype)])
    out = flat @ w
    return out[: out.shape[0] - pad].reshape(x.shape[:-1] + (w.shape[1],))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with a 2-D right operand (weights) or matching batched operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check(a.ndim >= 2 and b.ndim >= 2 and a.shape[-1] == b.shape[-2], "matmul", a.shape, b.shape)
    if b.ndim == 3:
        _check(a.ndim == 3 and a.shape[0] == b.shape[0], "matmul", a.shape, b.shape)
    out = Tensor(_rowwise_matmul(a.value, b.value) if b.ndim == 2 else a.value @ b.value)

    def fn(g):
        if a.requires_grad:
            if b.ndim == 2:
                _accum(a, _rowwise_matmul(g, b.value.T))
            else:
                _accum(a, g @ np.swapaxes(b.value, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                _accum(b, np.tensordot(a.value, g, axes=(list(range(a.ndim - 1)), list(range(g.ndim - 1)))))
            else:
                _accum(b, np.swapaxes(a.value, -1, -2) @ g)

    return _record(out, (a, b), fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        value = a.value + b.value
    except ValueError:
        _check(False, "add", a.shape, b.shape)
    out = Tensor(value)

    def fn(g):
        _accum(a, g)
        _accum(b, g)

    return _record(out, (a, b), fn)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    x, bias = _as_tensor(x), _as_tensor(bias)
    _check(bias.ndim == 1 and bias.shape[0] == x.shape[-1], "add_bias", x.shape, bias.shape)
    return add(x, bias)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        value = a.value - b.value
    except ValueError:
        _check(False, "sub", a.shape, b.shape)
    out = Tensor(value)

    def fn(g):
        _accum(a, g)
        _accum(b, -g)

    return _record(out, (a, b), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        value = a.value * b.value
    except ValueError:
        _check(False, "mul", a.shape, b.shape)
    out = Tensor(value)

    def fn(g):
        if a.requires_grad:
            _accum(a, g * b.value)
        if b.requires_grad:
            _accum(b, g * a.value)

    return _record(out, (a, b), fn)


elementwise_mul = mul


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        value = a.value / b.value
    except ValueError:
        _check(False, "div", a.shape, b.shape)
    out = Tensor(value)

    def fn(g):
        if a.requires_grad:
            _accum(a, g / b.value)
        if b.requires_grad:
            _accum(b, -g * a.value / (b.value * b.value))

    return _record(out, (a, b), fn)


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.value * x.value.dtype.type(c))

    def fn(g):
        _accum(x, g * c)

    return _record(out, (x,), fn)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    on = x.value > 0
    _pattern(on)
    out = Tensor(np.where(on, x.value, 0).astype(x.dtype, copy=False))

    def fn(g):
        _accum(x, g * on)

    return _record(out, (x,), fn)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    on = x.value > 0
    _pattern(on)
    k = np.where(on, x.dtype.type(1), x.dtype.type(slope))
    out = Tensor(x.value * k)

    def fn(g):
        _accum(x, g * k)

    return _record(out, (x,), fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row over its channels, then apply ``gain`` and ``bias``."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    _check(gain.shape == (d,) and bias.shape == (d,), "layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.value + bias.value)

    def fn(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.value
            _accum(x, inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)))

    return _record(out, (x, gain, bias), fn)


def _softmax_last(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = _softmax_last(x.value)
    out = Tensor(y)

    def fn(g):
        _accum(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _record(out, (x,), fn)


class SegmentIndex:
    """Contiguous segments ``indptr[i]:indptr[i+1]`` over axis -2 of an edge tensor."""

    def __init__(self, indptr: np.ndarray):
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.n = self.indptr.size - 1
        counts = np.diff(self.indptr)
        if (counts == 0).any():
            raise DiffError("segment with no entries (receiver without incoming edges)")
        self.starts = self.indptr[:-1]
        self.ids = np.repeat(np.arange(self.n), counts)
        self.n_items = int(self.indptr[-1])
        self._sum = sp.csr_matrix(
            (np.ones(self.n_items), np.arange(self.n_items), self.indptr), shape=(self.n, self.n_items)
        )

    def reduce_sum(self, v: np.ndarray) -> np.ndarray:
        # v: (..., E, C) -> (..., N, C)
        return np.add.reduceat(v, self.starts, axis=-2)

    def reduce_max(self, v: np.ndarray) -> np.ndarray:
        return np.maximum.reduceat(v, self.starts, axis=-2)

    def expand(self, v: np.ndarray) -> np.ndarray:
        return v[..., self.ids, :]


def segment_softmax(e: Tensor, segments: SegmentIndex) -> Tensor:
    """Softmax of edge scores ``(..., E, H)`` within each receiver's segment."""
    e = _as_tensor(e)
    _check(e.ndim >= 2 and e.shape[-2] == segments.n_items, "segment_softmax", e.shape, (segments.n_items,))
    m = segments.expand(segments.reduce_max(e.value))
    ex = np.exp(e.value - m)
    y = ex / segments.expand(segments.reduce_sum(ex))
    out = Tensor(y)

    def fn(g):
        dot = segments.expand(segments.reduce_sum(g * y))
        _accum(e, y * (g - dot))

    return _record(out, (e,), fn)


def segment_sum(x: Tensor, segments: SegmentIndex) -> Tensor:
    x = _as_tensor(x)
    _check(x.ndim >= 2 and x.shape[-2] == segments.n_items, "segment_sum", x.shape, (segments.n_items,))
    out = Tensor(segments.reduce_sum(x.value))

    def fn(g):
        _accum(x, segments.expand(g))

    return _record(out, (x,), fn)


class EdgeHeads:
    """Sparse layout for per-head weighted neighbour sums over a receiver-sorted edge list."""

    def __init__(self, indptr, senders, n: int, heads: int):
        self.n, self.heads = int(n), int(heads)
        indptr = np.asarray(indptr, dtype=np.int64)
        senders = np.asarray(senders, dtype=np.int64)
        self.senders = senders
        self.n_edges = senders.size
        counts = np.diff(indptr)
        self.receivers = np.repeat(np.arange(self.n), counts)
        # row (i, h) lists edges of segment i for head h; column (j, h)
        edge = np.arange(self.n_edges)
        hh = np.arange(heads)
        seg_of = self.receivers
        order = np.lexsort((edge[None, :].repeat(heads, 0).ravel(), np.repeat(hh, self.n_edges), np.tile(seg_of, heads)))
        e_idx = np.tile(edge, heads)[order]
        h_idx = np.repeat(hh, self.n_edges)[order]
        self.perm = e_idx * heads + h_idx  # position in alpha.ravel() for (E, H) layout
        self.indices = (senders[e_idx] * heads + h_idx).astype(np.int32)
        self.indptr = np.concatenate([[0], np.cumsum(np.repeat(counts, heads))]).astype(np.int32)

    def matrix(self, alpha_b: np.ndarray) -> sp.csr_matrix:
        data = alpha_b.reshape(-1)[self.perm]
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n * self.heads, self.n * self.heads))


def edge_aggregate(alpha: Tensor, x: Tensor, layout: EdgeHeads) -> Tensor:
    """``out[i, h] = sum_{e=(j->i)} alpha[e, h] * x[j, h]`` with heads as channel blocks.

    alpha is (B, E, H) and x is (B, N, H*d); equivalent to
    ``segment_sum(gather_rows(x, senders) * head_repeat(alpha, d))``.
    """
    alpha, x = _as_tensor(alpha), _as_tensor(x)
    h = layout.heads
    _check(
        alpha.ndim == 3 and x.ndim == 3 and alpha.shape[1:] == (layout.n_edges, h) and x.shape[1] == layout.n
        and x.shape[2] % h == 0 and alpha.shape[0] == x.shape[0],
        "edge_aggregate", alpha.shape, x.shape,
    )
    b, n, dd = x.shape
    d = dd // h
    mats = [layout.matrix(alpha.value[k]) for k in range(b)]
    out = Tensor(np.stack([np.asarray(mats[k] @ x.value[k].reshape(n * h, d)).reshape(n, dd) for k in range(b)]))

    def fn(g):
        if x.requires_grad:
            _accum(x, np.stack([np.asarray(mats[k].T @ g[k].reshape(n * h, d)).reshape(n, dd) for k in range(b)]))
        if alpha.requires_grad:
            ga = np.empty_like(alpha.value)
            for k in range(b):
                gr = g[k][layout.receivers].reshape(-1, h, d)
                xs = x.value[k][layout.senders].reshape(-1, h, d)
                ga[k] = np.einsum("ehd,ehd->eh", gr, xs)
            _accum(alpha, ga)

    return _record(out, (alpha, x), fn)


class RowIndex:
    """Row selection ``out[..., k, :] = x[..., index[k], :]`` with a cached scatter-add."""

    def __init__(self, index, n_source: int):
        self.index = np.asarray(index, dtype=np.int64)
        self.n_source = int(n_source)
        if self.index.size and (self.index.min() < 0 or self.index.max() >= self.n_source):
            raise DiffError("row index out of range")
        k = self.index.size
        self._scatter = sp.csr_matrix((np.ones(k), (self.index, np.arange(k))), shape=(self.n_source, k))

    def scatter_add(self, g: np.ndarray) -> np.ndarray:
        m = self._scatter.astype(g.dtype, copy=False)
        if g.ndim == 2:
            return np.asarray(m @ g)
        return np.stack([np.asarray(m @ gb) for gb in g])


def gather_rows(x: Tensor, index) -> Tensor:
    x = _as_tensor(x)
    idx = index if isinstance(index, RowIndex) else RowIndex(index, x.shape[-2])
    _check(x.ndim >= 2 and x.shape[-2] == idx.n_source, "gather_rows", x.shape, (idx.n_source,))
    out = Tensor(x.value[..., idx.index, :])

    def fn(g):
        _accum(x, idx.scatter_add(g))

    return _record(out, (x,), fn)


broadcast_rows = gather_rows


def embedding(table: Tensor, ids) -> Tensor:
    """Look up rows of a 2-D ``table`` for an integer id array of any shape (<= 2 axes)."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    _check(table.ndim == 2 and ids.ndim <= 2, "embedding", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DiffError(f"embedding: ids must lie in [0, {table.shape[0]})")
    out = Tensor(table.value[ids])

    def fn(g):
        acc = np.zeros_like(table.value)
        np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, acc)

    return _record(out, (table,), fn)


class PoolIndex:
    """Cluster layout for max pooling: members sorted by owner, segment starts."""

    def __init__(self, owner: np.ndarray, n_coarse: int):
        self.owner = np.asarray(owner, dtype=np.int64)
        self.n_coarse = int(n_coarse)
        self.order = np.argsort(self.owner, kind="stable")
        counts = np.bincount(self.owner, minlength=self.n_coarse)
        if (counts == 0).any():
            raise DiffError("empty cluster in pooling layout")
        self.starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.seg_ids = np.repeat(np.arange(self.n_coarse), counts)


def scatter_max(x: Tensor, pool: PoolIndex) -> Tensor:
    """Channelwise max over clusters; backward routes to the first argmax."""
    x = _as_tensor(x)
    _check(x.ndim >= 2 and x.shape[-2] == pool.owner.size, "scatter_max", x.shape, (pool.owner.size,))
    xs = x.value[..., pool.order, :]
    mx = np.maximum.reduceat(xs, pool.starts, axis=-2)
    pos = np.arange(xs.shape[-2]).reshape(-1, 1)
    hit = xs == mx[..., pool.seg_ids, :]
    first = np.minimum.reduceat(np.where(hit, pos, xs.shape[-2]), pool.starts, axis=-2)
    src = pool.order[first]  # (..., Nc, D) source row per output entry
    _pattern(src)
    out = Tensor(mx)

    def fn(g):
        acc = np.zeros_like(x.value)
        np.put_along_axis(acc, src, g, axis=-2)  # clusters are disjoint: no collisions
        _accum(x, acc)

    return _record(out, (x,), fn)


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.swapaxes(x.value, -1, -2))

    def fn(g):
        _accum(x, np.swapaxes(g, -1, -2))

    return _record(out, (x,), fn)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.value.reshape(shape))

    def fn(g):
        _accum(x, g.reshape(x.shape))

    return _record(out, (x,), fn)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, N, H*d) -> (B*H, N, d); a 2-D input is treated as B = 1."""
    x = _as_tensor(x)
    v = x.value if x.ndim == 3 else x.value[None]
    b, n, dd = v.shape
    _check(dd % heads == 0, "split_heads", x.shape, (heads,))
    d = dd // heads
    out = Tensor(v.reshape(b, n, heads, d).transpose(0, 2, 1, 3).reshape(b * heads, n, d))

    def fn(g):
        gg = g.reshape(b, heads, n, d).transpose(0, 2, 1, 3).reshape(b, n, dd)
        _accum(x, gg if x.ndim == 3 else gg[0])

    return _record(out, (x,), fn)


def merge_heads(x: Tensor, heads: int, batched: bool = True) -> Tensor:
    """Inverse of :func:`split_heads`."""
    x = _as_tensor(x)
    bh, n, d = x.shape
    _check(bh % heads == 0, "merge_heads", x.shape, (heads,))
    b = bh // heads
    v = x.value.reshape(b, heads, n, d).transpose(0, 2, 1, 3).reshape(b, n, heads * d)
    out = Tensor(v if batched else v[0])

    def fn(g):
        gg = g if batched else g[None]
        _accum(x, gg.reshape(b, n, heads, d).transpose(0, 2, 1, 3).reshape(bh, n, d))

    return _record(out, (x,), fn)


def head_dot(x: Tensor, a: Tensor) -> Tensor:
    """Per-head inner products: x (..., N, H*d), a (H, d) -> (..., N, H)."""
    x, a = _as_tensor(x), _as_tensor(a)
    h, d = a.shape if a.ndim == 2 else (0, 0)
    _check(a.ndim == 2 and x.shape[-1] == h * d, "head_dot", x.shape, a.shape)
    xv = x.value.reshape(x.shape[:-1] + (h, d))
    out = Tensor(np.einsum("...hd,hd->...h", xv, a.value))

    def fn(g):
        if x.requires_grad:
            _accum(x, (g[..., :, None] * a.value).reshape(x.shape))
        if a.requires_grad:
            _accum(a, np.einsum("kh,khd->hd", g.reshape(-1, h), xv.reshape(-1, h, d)))

    return _record(out, (x, a), fn)


def head_repeat(w: Tensor, d: int) -> Tensor:
    """Repeat each head weight over its ``d`` channels: (..., H) -> (..., H*d)."""
    w = _as_tensor(w)
    out = Tensor(np.repeat(w.value, d, axis=-1))

    def fn(g):
        _accum(w, g.reshape(g.shape[:-1] + (w.shape[-1], d)).sum(axis=-1))

    return _record(out, (w,), fn)


def group_softmax(x: Tensor, groups: int) -> Tensor:
    """Softmax across ``groups`` equal channel blocks: x (..., G*D), per row and channel."""
    x = _as_tensor(x)
    _check(x.shape[-1] % groups == 0, "group_softmax", x.shape, (groups,))
    dd = x.shape[-1] // groups
    v = x.value.reshape(x.shape[:-1] + (groups, dd))
    e = np.exp(v - v.max(axis=-2, keepdims=True))
    y = e / e.sum(axis=-2, keepdims=True)
    out = Tensor(y.reshape(x.shape))

    def fn(g):
        gv = g.reshape(y.shape)
        _accum(x, (y * (gv - (gv * y).sum(axis=-2, keepdims=True))).reshape(x.shape))

    return _record(out, (x,), fn)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    lead = parts[0].shape[:-1]
    _check(all(p.shape[:-1] == lead for p in parts), "concat_channels", *(p.shape for p in parts))
    widths = np.cumsum([0] + [p.shape[-1] for p in parts])
    out = Tensor(np.concatenate([p.value for p in parts], axis=-1))

    def fn(g):
        for p, lo, hi in zip(parts, widths[:-1], widths[1:]):
            if p.requires_grad:
                _accum(p, g[..., lo:hi])

    return _record(out, parts, fn)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    _check(0 <= start < stop <= x.shape[-1], "slice_channels", x.shape, (start, stop))
    out = Tensor(x.value[..., start:stop])

    def fn(g):
        acc = np.zeros_like(x.value)
        acc[..., start:stop] = g
        _accum(x, acc)

    return _record(out, (x,), fn)


def sparse_matmul(m: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse ``m`` (R, N) applied to the row axis of x (..., N, C)."""
    x = _as_tensor(x)
    _check(x.ndim >= 2 and x.shape[-2] == m.shape[1], "sparse_matmul", m.shape, x.shape)
    m = sp.csr_matrix(m).astype(x.dtype)
    mt = m.T.tocsr()

    def apply(mat, v):
        if v.ndim == 2:
            return np.asarray(mat @ v)
        return np.stack([np.asarray(mat @ vb) for vb in v])

    out = Tensor(apply(m, x.value))

    def fn(g):
        _accum(x, apply(mt, g))

    return _record(out, (x,), fn)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _as_tensor(x)
    out = Tensor(np.asarray(x.value.sum(axis=axis)))

    def fn(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _record(out, (x,), fn)


def mean(x: Tensor, axis=None) -> Tensor:
    x = _as_tensor(x)
    n = x.value.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / n)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Multihead softmax(Q K^T / sqrt(d)) V with heads concatenated; (B, N, D) or (N, D)."""
    batched = q.ndim == 3
    d = q.shape[-1] // heads
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scores = scale(matmul(qh, transpose(kh)), 1.0 / np.sqrt(d))
    attn = softmax_rows(scores)
    return merge_heads(matmul(attn, vh), heads, batched=batched)


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Ordered named trainable tensors with gradient accumulators."""

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        t.zero_grad()
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def count(self) -> int:
        return int(np.sum([t.value.size for t in self._params.values()]))

    def astype(self, dtype) -> "ParamStore":
        other = ParamStore(self.seed, dtype)
        for name, t in self._params.items():
            other.add(name, t.value)
        return other

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.value.copy() for name, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            if state[name].shape != t.value.shape:
                raise DiffError(f"shape mismatch for {name}: {state[name].shape} vs {t.value.shape}")
            t.value = np.array(state[name], dtype=self.dtype)

    def frozen(self):
        """Context manager that stops gradients through every parameter."""
        return _Frozen(self.tensors())


class _Frozen:
    def __init__(self, tensors: Iterable[Tensor]):
        self.tensors = list(tensors)

    def __enter__(self):
        self.flags = [t.requires_grad for t in self.tensors]
        for t in self.tensors:
            t.requires_grad = False
        return self

    def __exit__(self, *exc):
        for t, f in zip(self.tensors, self.flags):
            t.requires_grad = f


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int
    worst: tuple[str, int] | None = None

    def __float__(self) -> float:
        return self.max_rel_error


def _same_patterns(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    f: Callable[[], Tensor],
    params,
    eps: float = 1e-5,
    tol: float | None = None,
    max_coords: int = 64,
    seed: int = 0,
) -> GradCheckResult:
    """Central finite differences against the tape gradient.

    ``params`` is a ParamStore or a sequence of tensors (float64 expected).
    Up to ``max_coords`` coordinates per tensor are sampled. Coordinates whose
    +/-eps evaluations change any recorded activation pattern (a kink of relu,
    leaky relu or max pooling lies inside the stencil) are skipped.
    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    tensors = params.tensors() if isinstance(params, ParamStore) else list(params)
    for t in tensors:
        if t.value.dtype != np.float64:
            raise DiffError("grad_check needs float64 tensors")
        t.grad = np.zeros_like(t.value)
    with Tape() as tape:
        loss = f()
    base_patterns = tape.patterns
    backward(tape, loss)
    analytic = [t.grad.copy() for t in tensors]

    def evaluate():
        with Tape() as t2:
            val = f()
        return float(val.value), t2.patterns

    rng = np.random.default_rng(seed)
    worst, worst_at, checked, skipped = 0.0, None, 0, 0
    for ti, t in enumerate(tensors):
        flat = t.value.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp, pp = evaluate()
            flat[c] = orig - eps
            fm, pm = evaluate()
            flat[c] = orig
            if not (_same_patterns(pp, base_patterns) and _same_patterns(pm, base_patterns)):
                skipped += 1
                continue
            num = (fp - fm) / (2 * eps)
            ana = float(analytic[ti].reshape(-1)[c])
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            checked += 1
            if rel > worst:
                worst, worst_at = rel, (t.name or f"tensor{ti}", int(c))
    for t in tensors:
        t.zero_grad()
    result = GradCheckResult(worst, checked, skipped, worst_at)
    if tol is not None and worst > tol:
        raise AssertionError(f"gradient check failed: {result}")
    return result
