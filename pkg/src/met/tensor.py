"""Dense float64 tensors with a small reverse-mode differentiation engine.

Every op that touches a tensor with ``requires_grad`` appends a node to the
computation record. Nodes carry a monotonically increasing id, so walking
them in descending id order is a valid reverse topological order and the
accumulation order is fixed for a given program.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


class RankError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable recording for the current thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class _MacCounter:
    def __init__(self):
        self.total = 0


@contextmanager
def count_macs():
    """Count multiply-accumulates performed by ``matmul`` in this thread."""
    counter = _MacCounter()
    prev = getattr(_state, "macs", None)
    _state.macs = counter
    try:
        yield counter
    finally:
        _state.macs = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_inputs", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._inputs: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __float__(self):
        return float(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


@dataclass
class Parameter:
    """A named model tensor. Frozen parameters never record gradients."""

    name: str
    tensor: Tensor
    trainable: bool

    def __post_init__(self):
        self.tensor.name = self.name
        self.tensor.requires_grad = self.trainable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def shape(self):
        return self.tensor.shape

    @property
    def size(self) -> int:
        return int(self.tensor.data.size)


def parameter(name: str, value, trainable: bool) -> Parameter:
    return Parameter(name, Tensor(np.array(value, dtype=DTYPE)), trainable)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = tuple(inputs)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), backward)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _node(out, (x,), lambda g: (g * 0.5 / out,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x), exact erf form."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data ** 2) / math.sqrt(2.0 * math.pi)
    return _node(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data.copy())


# ---------------------------------------------------------------------------
# shape and reduction


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def getitem(x: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(x.data[idx], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over the last two axes; ``b`` may be a plain matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    counter = getattr(_state, "macs", None)
    if counter is not None:
        counter.total += int(out.size) * a.shape[-1]

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis (1/d variance), then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm over an empty axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), backward)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax needs at least one column")
    y = _softmax(x.data)
    return _node(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(n)
    out = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return _node(np.asarray(out), (logits,), backward)


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=DTYPE).ravel()
    v = np.asarray(v, dtype=DTYPE).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return float(u @ v / (nu * nv))


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Propagate d(loss)/d(leaf) and return gradients of named leaves.

    Leaf ``.grad`` buffers are overwritten. Tensors without
    ``requires_grad`` (frozen or detached) receive nothing.
    """
    if loss.data.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}

    nodes: dict[int, Tensor] = {}
    stack_ = [loss]
    while stack_:
        t = stack_.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack_.extend(i for i in t._inputs if i.requires_grad)

    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    out: dict[str, np.ndarray] = {}
    for tid in sorted(nodes, reverse=True):
        t = nodes[tid]
        g = grads.pop(tid, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g
            if t.name is not None:
                out[t.name] = g
            continue
        for inp, gi in zip(t._inputs, t._backward(g)):
            if not inp.requires_grad or gi is None:
                continue
            if inp._id in grads:
                grads[inp._id] = grads[inp._id] + gi
            else:
                grads[inp._id] = gi
    return out


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.tensor.grad = None
