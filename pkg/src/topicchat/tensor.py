"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray plus an optional gradient buffer. Operations
record their inputs and a backward closure; ``Tensor.backward()`` walks the
graph in reverse topological order and accumulates gradients into every
reachable tensor with ``requires_grad`` set.

Arrays default to float32. Float64 inputs are kept as-is so reference
computations (e.g. finite-difference checks) can run the same graph at
higher precision.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np


class TensorError(ValueError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def _as_array(data) -> np.ndarray:
    # float64 survives only when handed in as numpy data, so the engine stays
    # float32 by default but can run float64 end to end (the gradient oracle
    # depends on that). Python lists and ints land on float32.
    arr = np.asarray(data)
    if isinstance(data, (np.ndarray, np.generic)) and arr.dtype == np.float64:
        return arr
    return arr if arr.dtype == np.float32 else arr.astype(np.float32)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    # -- graph plumbing --------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        if self.data.size != 1:
            raise TensorError(
                f"backward requires a scalar root, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):  # noqa: D105
        return add(self, _wrap(other, self.data))

    def __radd__(self, other):
        return add(_wrap(other, self.data), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.data))

    def __rmul__(self, other):
        return mul(_wrap(other, self.data), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.data))

    def __sub__(self, other):
        return add(self, -_wrap(other, self.data))

    def __rsub__(self, other):
        return add(_wrap(other, self.data), -self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(value, like: np.ndarray | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    # scalar constants follow the other operand's dtype, so float64 runs stay
    # exactly float64 instead of picking up float32-quantized coefficients
    if like is not None and isinstance(value, (int, float)):
        return Tensor(np.asarray(value, dtype=like.dtype))
    return Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise TensorError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(grad @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ grad)

    return _make(data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise TensorError(f"transpose expects a 2-D tensor, got {a.data.shape}")

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(grad.T)

    return _make(a.data.T.copy(), (a,), backward)


# -- pointwise ----------------------------------------------------------------


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(grad * data)

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(grad / a.data)

    return _make(data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(grad * (1.0 - data * data))

    return _make(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(grad * data * (1.0 - data))

    return _make(data, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Smooth tanh-form activation; differentiable everywhere."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
            a._accumulate(grad * local)

    return _make(data, (a,), backward)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values; gradient passes only where the input was inside bounds."""
    data = np.clip(a.data, lo, hi)
    inside = ((a.data > lo) & (a.data < hi)).astype(a.data.dtype)

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(grad * inside)

    return _make(data, (a,), backward)


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(grad: np.ndarray) -> None:
        if not a.requires_grad:
            return
        g = grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).astype(a.data.dtype))

    return _make(data, (a,), backward)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    data = a.data.mean()

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, float(grad) / n))

    return _make(data, (a,), backward)


# -- structured ops -----------------------------------------------------------


def rows(a: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows (embedding lookup); backward scatter-adds."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise TensorError(
            f"row index out of range [0, {a.data.shape[0]}): "
            f"{int(idx.min())}..{int(idx.max())}"
        )
    data = a.data[idx]

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, grad)
            a._accumulate(buf)

    return _make(data, (a,), backward)


def select_positions(a: Tensor, row_ids: Sequence[int],
                     col_ids: Sequence[int]) -> Tensor:
    """Pick entries a[row_i, col_i] as a 1-D tensor."""
    r = np.asarray(row_ids, dtype=np.int64)
    c = np.asarray(col_ids, dtype=np.int64)
    if r.shape != c.shape:
        raise TensorError("row/col index lists differ in length")
    data = a.data[r, c]

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, (r, c), grad)
            a._accumulate(buf)

    return _make(data, (a,), backward)


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]

    def backward(grad: np.ndarray) -> None:
        at = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                p._accumulate(grad[at:at + size])
            at += size

    return _make(data, tuple(parts), backward)


def concat_cols(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.data.shape[1] for p in parts]

    def backward(grad: np.ndarray) -> None:
        at = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                p._accumulate(grad[:, at:at + size])
            at += size

    return _make(data, tuple(parts), backward)


def narrow_cols(a: Tensor, start: int, length: int) -> Tensor:
    data = a.data[:, start:start + length].copy()

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[:, start:start + length] = grad
            a._accumulate(buf)

    return _make(data, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(grad.reshape(a.data.shape))

    return _make(data, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            dot = (grad * data).sum(axis=axis, keepdims=True)
            a._accumulate(data * (grad - dot))

    return _make(data, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    norm = centered * inv
    data = norm * gain.data + bias.data

    def backward(grad: np.ndarray) -> None:
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(grad * norm, gain.data.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(grad, bias.data.shape))
        if x.requires_grad:
            n = x.data.shape[-1]
            g = grad * gain.data
            gm = g.mean(axis=-1, keepdims=True)
            gnm = (g * norm).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (g - gm - norm * gnm))

    return _make(data, (x, gain, bias), backward)


def straight_through(soft: Tensor, hard: np.ndarray) -> Tensor:
    """Forward takes ``hard`` values; backward passes gradients to ``soft``.

    Standard estimator for discrete sampling: the sampled one-hot drives the
    forward pass while the soft distribution receives the gradient as if it
    had been used directly.
    """
    hard = np.asarray(hard)
    if soft.data.shape != hard.shape:
        raise TensorError(
            f"straight_through shape mismatch: {soft.data.shape} vs {hard.shape}"
        )

    def backward(grad: np.ndarray) -> None:
        if soft.requires_grad:
            soft._accumulate(grad)

    return _make(hard.astype(soft.data.dtype), (soft,), backward)
