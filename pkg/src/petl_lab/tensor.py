"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value flowing through the models in this package is a :class:`Tensor`:
a numpy float64 array plus an optional gradient buffer and a record of the
operation that produced it. Calling :meth:`Tensor.backward` on a scalar walks
the recorded operations in reverse topological order and accumulates
``d(loss)/d(leaf)`` into every tracked leaf.

Design constraints honored throughout:

* float64 only -- finite-difference gradient verification needs the headroom;
* every operation validates that its output is finite and raises
  :class:`~petl_lab.errors.NonFiniteError` otherwise;
* fixed reduction orderings (numpy's deterministic kernels, single-threaded
  accumulation in backward) so reruns are bit-identical;
* a graph may be differentiated once; a second backward over the same
  recorded operations raises :class:`~petl_lab.errors.StaleGraphError`.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NonFiniteError, ShapeError, StaleGraphError

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable operation recording inside the block (pure inference)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _ensure_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"operation '{op}' produced non-finite values")


class Tensor:
    """A dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _ensure_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward_fn is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- gradient bookkeeping -------------------------------------------

    def _accum_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Fill ``grad`` on every tracked leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad or self._backward_fn is None:
            raise StaleGraphError("backward() on an untracked value; no operations recorded")

        # Post-order DFS with an explicit stack; reversal gives reverse
        # topological order. Iterative to survive deep graphs.
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
            if node._consumed:
                raise StaleGraphError("graph already consumed by a previous backward pass")
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
                node._consumed = True
        # Intermediate grads are scratch; only leaves keep theirs.
        for node in topo:
            if node._backward_fn is not None:
                node.grad = None

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


def _make_op(data: np.ndarray, parents: Sequence[Tensor],
             backward_fn: Callable[[np.ndarray], None] | None, op: str) -> Tensor:
    """Assemble an operation output, recording it only when tracking is on."""
    _ensure_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(g, b.data.shape))

    return _make_op(data, (a, b), backward_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(-g, b.data.shape))

    return _make_op(data, (a, b), backward_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(g * a.data, b.data.shape))

    return _make_op(data, (a, b), backward_fn, "mul")


# -- linear algebra -------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product ``a @ b`` with numpy broadcasting on batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _make_op(data, (a, b), backward_fn, "matmul")


# -- shape manipulation ----------------------------------------------------


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    data = t.data.reshape(shape)

    def backward_fn(g):
        if t.requires_grad:
            t._accum_grad(g.reshape(t.data.shape))

    return _make_op(data, (t,), backward_fn, "reshape")


def transpose(t: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = t.data.transpose(axes)

    def backward_fn(g):
        if t.requires_grad:
            t._accum_grad(g.transpose(inverse))

    return _make_op(data, (t,), backward_fn, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        pieces = np.split(g, offsets, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accum_grad(piece)

    return _make_op(data, tuple(tensors), backward_fn, "concat")


def gather_rows(t: Tensor, index) -> Tensor:
    """Select rows along axis 0: ``out[i] = t[index[i]]``."""
    idx = np.asarray(index, dtype=np.intp)
    data = t.data[idx]

    def backward_fn(g):
        if t.requires_grad:
            buf = np.zeros_like(t.data)
            np.add.at(buf, idx, g)
            t._accum_grad(buf)

    return _make_op(data, (t,), backward_fn, "gather_rows")


# -- reductions ------------------------------------------------------------


def tsum(t: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    data = t.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if not t.requires_grad:
            return
        if axis is None:
            t._accum_grad(np.broadcast_to(g, t.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            t._accum_grad(np.broadcast_to(gg, t.data.shape).copy())

    return _make_op(np.asarray(data), (t,), backward_fn, "sum")


def tmean(t: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = t.data.size if axis is None else t.data.shape[axis]
    return mul(tsum(t, axis=axis, keepdims=keepdims), 1.0 / n)


# -- normalization and attention kernels ------------------------------------


def softmax(t: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stable softmax along ``axis``; optional boolean mask (False = excluded).

    Masked positions get probability exactly zero; each row must keep at
    least one valid position.
    """
    x = t.data
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {t.shape}")
    if mask is None:
        m = x.max(axis=axis, keepdims=True)
        e = np.exp(x - m)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ShapeError("softmax row with every position masked")
        neg = np.where(mask, x, -np.inf)
        m = neg.max(axis=axis, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, x, m) - m), 0.0)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        if t.requires_grad:
            gy = g * y
            t._accum_grad(gy - y * gy.sum(axis=axis, keepdims=True))

    return _make_op(y, (t,), backward_fn, "softmax")


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    x = t.data
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"log_softmax axis {axis} invalid for shape {t.shape}")
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    sm = np.exp(data)

    def backward_fn(g):
        if t.requires_grad:
            t._accum_grad(g - sm * g.sum(axis=axis, keepdims=True))

    return _make_op(data, (t,), backward_fn, "log_softmax")


def layer_norm(t: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = t.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last extent {d}")
    mu = t.data.mean(axis=-1, keepdims=True)
    centered = t.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gamma.data + beta.data

    def backward_fn(g):
        lead = tuple(range(g.ndim - 1))
        if beta.requires_grad:
            beta._accum_grad(g.sum(axis=lead))
        if gamma.requires_grad:
            gamma._accum_grad((g * xhat).sum(axis=lead))
        if t.requires_grad:
            gx = g * gamma.data
            t._accum_grad(inv_std * (
                gx
                - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make_op(data, (t, gamma, beta), backward_fn, "layer_norm")


# -- activations -------------------------------------------------------------


def relu(t: Tensor) -> Tensor:
    data = np.maximum(t.data, 0.0)

    def backward_fn(g):
        if t.requires_grad:
            t._accum_grad(g * (t.data > 0.0))

    return _make_op(data, (t,), backward_fn, "relu")


def tanh(t: Tensor) -> Tensor:
    data = np.tanh(t.data)

    def backward_fn(g):
        if t.requires_grad:
            t._accum_grad(g * (1.0 - data * data))

    return _make_op(data, (t,), backward_fn, "tanh")


def gelu(t: Tensor) -> Tensor:
    """Exact Gaussian-CDF form: ``x * Phi(x)`` (no tanh approximation)."""
    x = t.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
    data = x * cdf

    def backward_fn(g):
        if t.requires_grad:
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
            t._accum_grad(g * (cdf + x * pdf))

    return _make_op(data, (t,), backward_fn, "gelu")


_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "gelu": gelu,
    "tanh": tanh,
}


def activation(kind: str, t: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(
            f"unknown activation '{kind}'; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(t)


def zeros(shape: Iterable[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad)
