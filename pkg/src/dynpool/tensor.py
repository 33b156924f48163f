"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Shapes are explicit: elementwise ops require equal shapes, except that a
size-1 operand broadcasts as a scalar. matmul is strictly 2D. Every
differentiable op is covered by finite-difference tests.

matmul also feeds a multiply-add tally used by the FLOPs instrumentation;
counting happens only inside a `counting_scope` while a meter is active.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import DimensionError, StateError


class MatmulTally:
    """Single-writer multiply-add counter for in-scope matmuls."""

    def __init__(self):
        self.active = False
        self.in_scope = False
        self.count = 0

    def begin(self):
        if self.active:
            raise StateError("a flops measurement is already running")
        self.active = True
        self.count = 0

    def end(self) -> int:
        if not self.active:
            raise StateError("no flops measurement is running")
        self.active = False
        return self.count


TALLY = MatmulTally()


@contextmanager
def counting_scope():
    """Mark a region whose matmuls count toward the active measurement."""
    prev = TALLY.in_scope
    TALLY.in_scope = True
    try:
        yield
    finally:
        TALLY.in_scope = prev


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A dense float64 array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._backward = None
        self._prev: tuple[Tensor, ...] = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g)  # copy: g may alias or view a consumer's grad
        else:
            self.grad += g

    def _accum_fresh(self, g: np.ndarray):
        # for backward paths that always hand over a freshly allocated array
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._prev = tuple(parents)
            out._backward = backward
        return out

    def backward(self, grad=None):
        if not self.requires_grad:
            raise StateError("backward on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward without seed grad needs a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = _as_array(grad)
            if grad.shape != self.data.shape:
                raise DimensionError("seed grad shape mismatch")

        # iterative topological sort (graphs can be deep at long sequences)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if child.requires_grad and id(child) not in visited:
                    stack.append((child, False))

        self._accum(grad)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic --------------------------------------------

    @staticmethod
    def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
        # only scalar (size-1) broadcasting is supported
        if g.shape == tuple(shape):
            return g
        return np.sum(g).reshape(shape)

    def _check_elementwise(self, other: "Tensor"):
        if self.shape != other.shape and self.size != 1 and other.size != 1:
            raise DimensionError(f"elementwise op on shapes {self.shape} and {other.shape}")

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        self._check_elementwise(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accum(Tensor._reduce_to(g, a.shape))
            if b.requires_grad:
                b._accum(Tensor._reduce_to(g, b.shape))

        return Tensor._make(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def backward(g):
            if a.requires_grad:
                a._accum_fresh(-g)

        return Tensor._make(-a.data, (a,), backward)

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        self._check_elementwise(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accum_fresh(Tensor._reduce_to(g * b.data, a.shape))
            if b.requires_grad:
                b._accum_fresh(Tensor._reduce_to(g * a.data, b.shape))

        return Tensor._make(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise DimensionError("division is supported by python scalars only")
        return self * (1.0 / float(scalar))

    # -- linear algebra ------------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise DimensionError("matmul requires 2D operands")
        if self.shape[1] != other.shape[0]:
            raise DimensionError(f"matmul inner extents differ: {self.shape} @ {other.shape}")
        a, b = self, other
        if TALLY.active and TALLY.in_scope:
            TALLY.count += a.shape[0] * a.shape[1] * b.shape[1]

        def backward(g):
            if a.requires_grad:
                a._accum_fresh(g @ b.data.T)
            if b.requires_grad:
                b._accum_fresh(a.data.T @ g)

        return Tensor._make(a.data @ b.data, (a, b), backward)

    __matmul__ = matmul

    def transpose(self) -> "Tensor":
        if self.data.ndim != 2:
            raise DimensionError("transpose requires a 2D tensor")
        a = self

        def backward(g):
            a._accum(g.T)

        return Tensor._make(a.data.T.copy(), (a,), backward)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape
        data = a.data.reshape(shape)

        def backward(g):
            a._accum(g.reshape(old))

        return Tensor._make(data, (a,), backward)

    def slice_axis(self, axis: int, start: int, stop: int) -> "Tensor":
        a = self
        nd = a.data.ndim
        if not -nd <= axis < nd:
            raise DimensionError(f"axis {axis} out of range for ndim {nd}")
        axis = axis % nd
        extent = a.data.shape[axis]
        if not (0 <= start <= stop <= extent):
            raise IndexError(f"slice [{start}:{stop}] out of range for extent {extent}")
        idx = tuple(slice(None) if ax != axis else slice(start, stop) for ax in range(nd))

        def backward(g):
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[idx] += g

        return Tensor._make(a.data[idx].copy(), (a,), backward)

    def sum(self) -> "Tensor":
        a = self

        def backward(g):
            a._accum_fresh(np.full_like(a.data, g))

        return Tensor._make(a.data.sum(), (a,), backward)

    def mean(self) -> "Tensor":
        return self.sum() / self.data.size


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along `axis`; backward splits the gradient back."""
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of zero tensors")
    nd = tensors[0].data.ndim
    for t in tensors:
        if t.data.ndim != nd:
            raise DimensionError("concat operands must share ndim")
    axis = axis % nd
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.data.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = tuple(slice(None) if ax != axis else slice(lo, hi) for ax in range(nd))
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g[idx]

    return Tensor._make(data, tuple(tensors), backward)


def relu(x: Tensor) -> Tensor:
    """max(0, x); gradient is zero at and below zero (hinge convention)."""
    a = x
    mask = a.data > 0.0

    def backward(g):
        a._accum_fresh(g * mask)

    return Tensor._make(np.maximum(a.data, 0.0), (a,), backward)


def silu(x: Tensor) -> Tensor:
    a = x
    sig = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a._accum_fresh(g * sig * (1.0 + a.data * (1.0 - sig)))

    return Tensor._make(a.data * sig, (a,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    a = x
    nd = a.data.ndim
    axis = axis % nd if nd else 0
    if a.data.ndim == 0 or a.data.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        a._accum_fresh(y * (g - dot))

    return Tensor._make(y, (a,), backward)


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis, with a learned gain."""
    a, w = x, weight
    n = a.data.shape[-1]
    if w.data.shape != (n,):
        raise DimensionError(f"rmsnorm weight shape {w.shape} does not match last axis {n}")
    ms = np.mean(a.data * a.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    normed = a.data * inv

    def backward(g):
        if w.requires_grad:
            w._accum_fresh((g * normed).reshape(-1, n).sum(axis=0))
        if a.requires_grad:
            gw = g * w.data
            dot = (gw * a.data).sum(axis=-1, keepdims=True)
            a._accum_fresh(inv * gw - a.data * (inv ** 3) * dot / n)

    return Tensor._make(normed * w.data, (a, w), backward)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of `table`; backward scatter-adds into the table."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2:
        raise DimensionError("embedding table must be 2D")
    if idx.ndim != 1:
        raise DimensionError("indices must be 1D")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError("embedding index out of range")
    t = table

    def backward(g):
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        np.add.at(t.grad, idx, g)

    return Tensor._make(t.data[idx], (t,), backward)


def maxpool_grid(x: Tensor, kernel) -> Tensor:
    """Ceil-mode per-channel max pool of an (h, w, d) grid.

    Partial edge windows are allowed, so the output shape is always
    (ceil(h/kh), ceil(w/kw), d). Gradients route to the argmax cell of each
    window, first occurrence in row-major order on ties.
    """
    kh, kw = int(kernel[0]), int(kernel[1])
    if x.data.ndim != 3:
        raise DimensionError("maxpool_grid expects an (h, w, d) tensor")
    h, w, d = x.data.shape
    if h < 1 or w < 1 or d < 1:
        raise DimensionError(f"maxpool_grid on zero-extent input {x.shape}")
    if kh < 1 or kw < 1:
        raise DimensionError(f"pool kernel must be positive, got {(kh, kw)}")
    a = x
    out, arg_r, arg_c = kernels.maxpool_grid_forward(a.data, kh, kw)

    def backward(g):
        a._accum_fresh(kernels.maxpool_grid_backward(g, arg_r, arg_c, h, w))

    return Tensor._make(out, (a,), backward)


def mha_attend(q: Tensor, k: Tensor, v: Tensor, n_heads: int, scale: float,
               mask: np.ndarray | None = None, need_weights: bool = False):
    """Scaled dot-product attention over column-grouped heads.

    q is (n, d) and k/v are (m, d) with d split into n_heads contiguous
    column blocks. `mask` is an additive (n, m) constant. The score and
    value products feed the matmul tally as 2*n*m*d multiply-adds. With
    need_weights the per-head probability matrices are also returned.
    """
    n, d = q.shape
    m = k.shape[0]
    if d % n_heads != 0:
        raise DimensionError(f"width {d} not divisible into {n_heads} heads")
    if k.shape != (m, d) or v.shape != (m, d):
        raise DimensionError("k and v must share shape (m, d)")
    if mask is not None and mask.shape != (n, m):
        raise DimensionError(f"mask shape {mask.shape} does not match ({n}, {m})")
    dh = d // n_heads
    qh = q.data.reshape(n, n_heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(m, n_heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(m, n_heads, dh).transpose(1, 0, 2)
    scores = np.matmul(qh, kh.transpose(0, 2, 1)) * scale
    if mask is not None:
        scores += mask
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    merged = np.matmul(probs, vh)
    out_data = merged.transpose(1, 0, 2).reshape(n, d)
    if TALLY.active and TALLY.in_scope:
        TALLY.count += 2 * n * m * d

    def backward(g):
        go = g.reshape(n, n_heads, dh).transpose(1, 0, 2)
        if q.requires_grad or k.requires_grad:
            dp = np.matmul(go, vh.transpose(0, 2, 1))
            ds = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True))
            ds *= scale
            if q.requires_grad:
                q._accum_fresh(np.matmul(ds, kh).transpose(1, 0, 2).reshape(n, d))
            if k.requires_grad:
                k._accum_fresh(np.matmul(ds.transpose(0, 2, 1), qh).transpose(1, 0, 2).reshape(m, d))
        if v.requires_grad:
            v._accum_fresh(np.matmul(probs.transpose(0, 2, 1), go).transpose(1, 0, 2).reshape(m, d))

    out = Tensor._make(out_data, (q, k, v), backward)
    if need_weights:
        return out, [probs[h].copy() for h in range(n_heads)]
    return out


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of rows of `logits` against integer `targets`."""
    idx = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise DimensionError("cross_entropy expects (n, vocab) logits")
    n, v = logits.data.shape
    if idx.shape != (n,):
        raise DimensionError(f"targets shape {idx.shape} does not match {n} rows")
    if n == 0:
        raise DimensionError("cross_entropy on zero rows")
    if idx.min() < 0 or idx.max() >= v:
        raise IndexError("target index out of range")
    a = logits
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + a.data.max(axis=1)
    losses = lse - a.data[np.arange(n), idx]

    def backward(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), idx] -= 1.0
        a._accum_fresh(p * (float(g) / n))

    return Tensor._make(losses.mean(), (a,), backward)
