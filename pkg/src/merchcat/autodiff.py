"""Reverse-mode automatic differentiation over dense float64 arrays.

Deliberately small: only the operations the classifier networks need are
provided (1-D convolution, linear maps, ReLU, dropout, global average
pooling, softmax, negative log likelihood, and a handful of structural
ops).  Everything is float64; there is no broadcasting beyond the bias
patterns used by the layers.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, UsageError

PROB_FLOOR = 1e-12

_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Tensor:
    """A dense float64 array plus an optional gradient accumulator.

    Leaf tensors created with ``requires_grad=True`` own a zero-initialized
    ``grad`` buffer.  Tensors produced by operations carry backward closures
    and lazily allocate ``grad`` during :meth:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable ``grad`` buffer.

        Only a scalar (single-element) tensor may seed a backward pass.
        Calling backward twice without zeroing doubles the accumulated
        gradients; callers own the zeroing policy.
        """
        if self.data.size != 1:
            raise UsageError(
                f"backward requires a scalar, got shape {self.data.shape}"
            )
        order = self._toposort()
        # Interior gradients are local to this pass; only leaves accumulate
        # across repeated backward calls.
        for node in order:
            if node._backward_fn is not None:
                node.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def _toposort(self):
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # Small conveniences used by tests and loss composition.
    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)


def parameter(data, requires_grad: bool = True) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def assert_finite(t: Tensor, context: str = "") -> None:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values encountered {context}")


def _wants_graph(*parents: Tensor) -> bool:
    return _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents)


def _node(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _wants_graph(*parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also allows a trailing-axis bias vector for ``b``."""
    if a.data.shape == b.data.shape:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g)
        return _node(a.data + b.data, (a, b), _bw)
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.data.shape[-1] == b.data.shape[0]:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                axes = tuple(range(g.ndim - 1))
                b._accumulate(g.sum(axis=axes) if axes else g)
        return _node(a.data + b.data, (a, b), _bw)
    raise DimensionError(f"cannot add shapes {a.data.shape} and {b.data.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"cannot multiply shapes {a.data.shape} and {b.data.shape}")

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _node(a.data * b.data, (a, b), _bw)


def scale(a: Tensor, s: float) -> Tensor:
    def _bw(g):
        if a.requires_grad:
            a._accumulate(g * s)

    return _node(a.data * s, (a,), _bw)


def reshape(a: Tensor, shape) -> Tensor:
    original = a.data.shape

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g.reshape(original))

    return _node(a.data.reshape(shape), (a,), _bw)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    arrays = [p.data for p in parts]
    widths = [arr.shape[axis] for arr in arrays]
    splits = np.cumsum(widths)[:-1]

    def _bw(g):
        pieces = np.split(g, splits, axis=axis)
        for part, piece in zip(parts, pieces):
            if part.requires_grad:
                part._accumulate(piece)

    return _node(np.concatenate(arrays, axis=axis), tuple(parts), _bw)


def tensor_sum(a: Tensor) -> Tensor:
    def _bw(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, float(g)))

    return _node(np.array(a.data.sum()), (a,), _bw)


def tensor_mean(a: Tensor) -> Tensor:
    count = a.data.size

    def _bw(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, float(g) / count))

    return _node(np.array(a.data.mean()), (a,), _bw)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape (in, out).

    ``x`` may be a single vector (in,) or a batch (B, in).
    """
    n_in, n_out = weight.data.shape
    if x.data.shape[-1] != n_in:
        raise DimensionError(
            f"linear got input width {x.data.shape[-1]}, weight expects {n_in}"
        )
    if bias.data.shape != (n_out,):
        raise DimensionError(f"bias shape {bias.data.shape} != ({n_out},)")
    single = x.data.ndim == 1
    x2 = x.data[None, :] if single else x.data
    out = x2 @ weight.data + bias.data

    def _bw(g):
        g2 = g[None, :] if single else g
        if weight.requires_grad:
            weight._accumulate(x2.T @ g2)
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            gx = g2 @ weight.data.T
            x._accumulate(gx[0] if single else gx)

    return _node(out[0] if single else out, (x, weight, bias), _bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T if b.data.ndim == 2 else np.outer(g, b.data))
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), _bw)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, padding: int) -> Tensor:
    """Temporal convolution.

    ``x``: (T, C_in) or (B, T, C_in); ``weight``: (C_out, C_in, K);
    ``bias``: (C_out,).  Input is zero-padded by ``padding`` on both ends of
    the time axis, so the output length is T + 2*padding - K + 1.
    """
    c_out, c_in, k = weight.data.shape
    single = x.data.ndim == 2
    xb = x.data[None] if single else x.data
    if xb.ndim != 3 or xb.shape[2] != c_in:
        raise DimensionError(
            f"conv1d input channels {xb.shape[-1] if xb.ndim else '?'} "
            f"do not match weight C_in={c_in}"
        )
    if padding < 0:
        raise UsageError("padding must be nonnegative")
    batch, t_in, _ = xb.shape
    t_out = t_in + 2 * padding - k + 1
    if t_out < 1:
        raise DimensionError(
            f"kernel {k} exceeds padded sequence length {t_in + 2 * padding}"
        )
    if padding:
        xp = np.zeros((batch, t_in + 2 * padding, c_in))
        xp[:, padding : padding + t_in, :] = xb
    else:
        xp = xb
    # One matmul per kernel offset; K is small so this stays dominated by BLAS.
    flat_out = np.broadcast_to(bias.data, (batch * t_out, c_out)).copy()
    slabs = []
    for kk in range(k):
        slab = np.ascontiguousarray(xp[:, kk : kk + t_out, :]).reshape(-1, c_in)
        slabs.append(slab)
        flat_out += slab @ weight.data[:, :, kk].T
    out = flat_out.reshape(batch, t_out, c_out)

    def _bw(g):
        g2 = g.reshape(-1, c_out)
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for kk in range(k):
                gw[:, :, kk] = g2.T @ slabs[kk]
            weight._accumulate(gw)
        if x.requires_grad:
            gxp = np.zeros((batch, t_in + 2 * padding, c_in))
            for kk in range(k):
                gxp[:, kk : kk + t_out, :] += (g2 @ weight.data[:, :, kk]).reshape(
                    batch, t_out, c_in
                )
            gx = gxp[:, padding : padding + t_in, :]
            x._accumulate(gx[0] if single else gx)

    return _node(out[0] if single else out, (x, weight, bias), _bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def _bw(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return _node(np.where(mask, x.data, 0.0), (x,), _bw)


def dropout(x: Tensor, keep_prob: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: keeps each element with probability ``keep_prob``.

    Survivors are scaled by 1/keep_prob so the expectation matches the
    input; eval mode is the identity.
    """
    if not 0.0 < keep_prob <= 1.0:
        raise UsageError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if not train or keep_prob == 1.0:
        return x
    if rng is None:
        raise UsageError("training-mode dropout needs an explicit rng")
    mask = (rng.random(x.data.shape) < keep_prob) / keep_prob

    def _bw(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return _node(x.data * mask, (x,), _bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the time axis: (T, C) -> (C,), (B, T, C) -> (B, C)."""
    if x.data.ndim not in (2, 3) or x.data.shape[-2] < 1:
        raise DimensionError(f"cannot pool over shape {x.data.shape}")
    axis = x.data.ndim - 2
    t = x.data.shape[axis]

    def _bw(g):
        if x.requires_grad:
            x._accumulate(np.repeat(np.expand_dims(g / t, axis), t, axis=axis))

    return _node(x.data.mean(axis=axis), (x,), _bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, floored at PROB_FLOOR to keep logs finite."""
    if x.data.ndim == 0 or x.data.shape[-1] == 0:
        raise DimensionError("softmax needs a nonempty vector")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    y = np.maximum(y, PROB_FLOOR)

    def _bw(g):
        if x.requires_grad:
            inner = (g * y).sum(axis=-1, keepdims=True)
            x._accumulate(y * (g - inner))

    return _node(y, (x,), _bw)


def nll_loss(probs: Tensor, labels) -> Tensor:
    """Mean negative log likelihood of the true classes.

    ``probs``: (B, c) rows summing to 1 (validated to 1e-6); ``labels``: (B,)
    integer class indices.  Probabilities are clamped at PROB_FLOOR before
    the log.
    """
    p = probs.data
    if p.ndim == 1:
        p = p[None, :]
        labels = np.atleast_1d(labels)
    labels = np.asarray(labels, dtype=np.int64)
    batch, c = p.shape
    if labels.shape != (batch,):
        raise DimensionError(f"labels shape {labels.shape} != ({batch},)")
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= c:
        raise DimensionError(f"label index out of range for {c} classes")
    sums = p.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise UsageError("probability rows must sum to 1 within 1e-6")
    picked = p[np.arange(batch), labels]
    clamped = np.maximum(picked, PROB_FLOOR)
    loss = -np.log(clamped).mean()

    def _bw(g):
        if probs.requires_grad:
            gp = np.zeros_like(probs.data)
            live = picked >= PROB_FLOOR  # clamp zeroes the gradient below the floor
            rows = np.arange(batch)[live]
            contrib = -float(g) / (clamped[live] * batch)
            if probs.data.ndim == 1:
                gp[labels[live]] = contrib
            else:
                gp[rows, labels[live]] = contrib
            probs._accumulate(gp)

    return _node(np.array(loss), (probs,), _bw)


def rowwise_bmm(h: Tensor, w: Tensor) -> Tensor:
    """Per-row vector-matrix product: (B, N) x (B, N, C) -> (B, C)."""
    if h.data.ndim != 2 or w.data.ndim != 3 or h.data.shape != w.data.shape[:2]:
        raise DimensionError(
            f"rowwise_bmm shapes {h.data.shape} and {w.data.shape} disagree"
        )
    out = np.einsum("bn,bnc->bc", h.data, w.data)

    def _bw(g):
        if h.requires_grad:
            h._accumulate(np.einsum("bc,bnc->bn", g, w.data))
        if w.requires_grad:
            w._accumulate(np.einsum("bn,bc->bnc", h.data, g))

    return _node(out, (h, w), _bw)
