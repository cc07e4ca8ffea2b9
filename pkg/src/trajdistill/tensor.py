"""Reverse-mode automatic differentiation on top of numpy arrays.

Every backward rule is written in terms of ``Tensor`` operations, so a
gradient computed with ``create_graph=True`` is itself a graph node and can
be differentiated again. The student unroll relies on this: the parameters
after each inner SGD step stay non-leaf nodes of one graph that reaches back
to the synthetic images and the learning rate.

The graph is implicit. Each non-leaf tensor keeps references to its parents
and a closure mapping the output cotangent to parent cotangents; ``backward``
recovers a topological order by depth-first search from the loss.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, InputError

_GRAD_ENABLED = True
_DEFAULT_DTYPE = np.dtype(np.float32)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, enabled
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def default_dtype(dtype):
    """Set the dtype used for tensors created from Python data (float32 by default)."""
    global _DEFAULT_DTYPE
    prev, _DEFAULT_DTYPE = _DEFAULT_DTYPE, np.dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_op")
    # make ndarray <op> Tensor defer to the Tensor reflected operators
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] | None = None
        self._backward: Callable | None = None
        self._op = "leaf"

    @classmethod
    def _const(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t._parents = None
        t._backward = None
        t._op = "const"
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._parents is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._const(self.data)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad}, op={self._op})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def square(self):
        return square(self)

    def sqrt(self):
        return sqrt(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor._const(np.asarray(x, dtype=dtype))


def _result(data, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = _new_tensor(Tensor)
    out.data = data
    out._op = op
    if _GRAD_ENABLED:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = parents
                out._backward = backward
                return out
    out.requires_grad = False
    out._parents = None
    out._backward = None
    return out


_new_tensor = object.__new__


def _binary(a, b):
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


# -- broadcasting adjoint pair ----------------------------------------------

def _sum_to_np(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = x.ndim - len(shape)
    if lead:
        x = x.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and x.shape[i] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x


def sum_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _result(_sum_to_np(x.data, shape), (x,),
                   lambda g: (broadcast_to(g, x.shape),), "sum_to")


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _result(np.broadcast_to(x.data, shape), (x,),
                   lambda g: (sum_to(g, x.shape),), "broadcast_to")


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (sum_to(g, a.shape), neg(sum_to(g, b.shape))), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (sum_to(g * b, a.shape), sum_to(g * a, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _binary(a, b)

    def backward(g):
        gb = g / b
        return sum_to(gb, a.shape), neg(sum_to(gb * a / b, b.shape))

    return _result(a.data / b.data, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (neg(g),), "neg")


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (g * a * 2.0,), "square")


def exp(a: Tensor) -> Tensor:
    out = None

    def backward(g):
        return (g * out,)

    out = _result(np.exp(a.data), (a,), backward, "exp")
    return out


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = None

    def backward(g):
        return (g / (out * 2.0),)

    out = _result(np.sqrt(a.data), (a,), backward, "sqrt")
    return out


def relu(a: Tensor) -> Tensor:
    mask = Tensor._const((a.data > 0).astype(a.dtype))
    return _result(a.data * mask.data, (a,), lambda g: (g * mask,), "relu")


# -- reductions and shape ---------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(a: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def backward(g):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _result(np.asarray(data), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum(a, axes, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    if data.shape == a.shape:
        return a
    return _result(data, (a,), lambda g: (reshape(g, a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim - 1, -1, -1)) if axes is None else tuple(axes)
    inverse = tuple(axes.index(i) for i in range(len(axes)))
    return _result(a.data.transpose(axes), (a,),
                   lambda g: (transpose(g, inverse),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    return _result(a.data[index], (a,),
                   lambda g: (scatter(g, index, a.shape),), "getitem")


def scatter(g: Tensor, index, shape) -> Tensor:
    """Adjoint of ``getitem``: place ``g`` at ``index`` in zeros of ``shape``."""
    data = np.zeros(shape, dtype=g.dtype)
    np.add.at(data, index, g.data)
    return _result(data, (g,), lambda h: (getitem(h, index),), "scatter")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(index)))
        return tuple(out)

    return _result(np.concatenate([p.data for p in parts], axis=axis), parts, backward, "concat")


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1))


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _binary(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _result(a.data @ b.data, (a, b),
                   lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)), "matmul")


def im2col(x: Tensor) -> Tensor:
    """3x3 patches with zero padding 1: [b,c,h,w] -> [b*h*w, c*9]."""
    b, c, h, w = x.shape
    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)
    return _result(cols, (x,), lambda g: (col2im(g, x.shape),), "im2col")


def col2im(cols: Tensor, shape) -> Tensor:
    """Adjoint of ``im2col``: scatter-add patches back into an image batch."""
    b, c, h, w = shape
    blocks = cols.data.reshape(b, h, w, c, 3, 3).transpose(0, 3, 4, 5, 1, 2)
    padded = np.zeros((b, c, h + 2, w + 2), dtype=cols.dtype)
    for i in range(3):
        for j in range(3):
            padded[:, :, i:i + h, j:j + w] += blocks[:, :, i, j]
    return _result(padded[:, :, 1:-1, 1:-1].copy(), (cols,),
                   lambda g: (im2col(g),), "col2im")


def conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Stride-1 3x3 cross-correlation with zero padding 1."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    o, c, kh, kw = kernel.shape
    if (kh, kw) != (3, 3):
        raise DimensionError(f"conv2d: kernel must be 3x3, got {kernel.shape}")
    if x.shape[1] != c:
        raise DimensionError(f"conv2d: input {x.shape} has {x.shape[1]} channels, kernel {kernel.shape} expects {c}")
    b, _, h, w = x.shape
    out = matmul(im2col(x), transpose(reshape(kernel, (o, c * 9))))
    return transpose(reshape(out, (b, h, w, o)), (0, 3, 1, 2))


def avg_pool2d(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2d: spatial dims must be even, got {x.shape}")
    return mean(reshape(x, (b, c, h // 2, 2, w // 2, 2)), axis=(3, 5))


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    centered = x - mean(x, axis=(2, 3), keepdims=True)
    var = mean(square(centered), axis=(2, 3), keepdims=True)
    return centered / sqrt(var + eps)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross entropy: logits {logits.shape} vs labels {labels.shape}")
    b, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"cross entropy: labels must lie in [0, {c})")
    # the max shift is a constant: softmax is invariant to it, so no gradient is lost
    shift = Tensor._const(logits.data.max(axis=1, keepdims=True))
    z = logits - shift
    lse = log(sum(exp(z), axis=1, keepdims=True))
    onehot = np.zeros((b, c), dtype=logits.dtype)
    onehot[np.arange(b), labels] = 1.0
    picked = sum((z - lse) * Tensor._const(onehot))
    return picked * (-1.0 / b)


# -- differentiation --------------------------------------------------------

def _relevant_order(root: Tensor, stop: set[int] | None) -> list[Tensor]:
    """Post-order over graph nodes that lead to a requested input.

    With ``stop`` given, traversal halts at those nodes and only nodes with a
    path to one of them are kept; otherwise every grad-requiring ancestor is.
    """
    order: list[Tensor] = []
    relevant: dict[int, bool] = {}
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            if stop is not None and key in stop:
                keep = True
            elif node._parents is None:
                keep = stop is None and node.requires_grad
            else:
                keep = any(relevant.get(id(p), False) for p in node._parents)
            relevant[key] = keep
            if keep:
                order.append(node)
            continue
        if key in relevant:
            continue
        relevant[key] = False
        stack.append((node, True))
        if node._parents is not None and not (stop is not None and key in stop):
            for p in node._parents:
                if p.requires_grad and id(p) not in relevant:
                    stack.append((p, False))
    return order


def grad(loss: Tensor, inputs: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of scalar ``loss`` with respect to each of ``inputs``.

    Inputs may be interior graph nodes. With ``create_graph`` the returned
    tensors are attached to the graph and can be differentiated again.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    inputs = list(inputs)
    stop = {id(t) for t in inputs}
    grads: dict[int, Tensor] = {}
    if loss.requires_grad:
        order = _relevant_order(loss, stop)
        grads[id(loss)] = Tensor._const(np.ones_like(loss.data))
        with _grad_mode(create_graph):
            for node in reversed(order):
                g = grads.get(id(node))
                if g is None or node._parents is None or id(node) in stop:
                    continue
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else prev + pg
    out = []
    for t in inputs:
        g = grads.get(id(t))
        out.append(g if g is not None else Tensor._const(np.zeros_like(t.data)))
    return out


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None,
             create_graph: bool = False) -> dict[Tensor, Tensor]:
    """Return ``{leaf: dloss/dleaf}``.

    When ``leaves`` is None every grad-requiring leaf reachable from the loss
    is included. The graph is never freed, so repeated calls replay it.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if leaves is None:
        leaves = [n for n in _relevant_order(loss, None) if n._parents is None] if loss.requires_grad else []
    leaves = list(leaves)
    return dict(zip(leaves, grad(loss, leaves, create_graph=create_graph)))
