"""Dense float64 tensors with a dynamic reverse-mode tape.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` on raw arrays and a ``backward`` returning one gradient per
input (``None`` where no gradient is needed).  The tape is rebuilt on each
forward pass; ``backward`` walks it once in reverse topological order and
then releases the saved buffers.
"""
from __future__ import annotations

import contextlib
from typing import Optional, Sequence

import numpy as np

from ..errors import DomainError, GraphConsumed, NotScalar, ShapeMismatch

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build no tape inside the block (frozen networks, teacher views)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the axes that numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise ShapeMismatch(f"shapes {a} and {b} do not broadcast") from exc


class Function:
    """A recorded operation on the tape."""

    def __init__(self):
        self.parents: tuple = ()
        self.needs: tuple = ()
        self.saved: Optional[tuple] = ()
        self.released = False

    def save(self, *arrays):
        self.saved = arrays

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    def release(self):
        self.saved = None
        self.released = True

    @classmethod
    def apply(cls, *inputs, **kwargs) -> "Tensor":
        tensors = tuple(as_tensor(x) for x in inputs)
        ctx = cls()
        track = _GRAD_ENABLED and any(t.requires_grad for t in tensors)
        ctx.needs = tuple(track and t.requires_grad for t in tensors)
        out = ctx.forward(*(t.data for t in tensors), **kwargs)
        result = Tensor(out, requires_grad=track)
        if track:
            ctx.parents = tensors
            result._ctx = ctx
        else:
            ctx.saved = None
        return result


class Tensor:
    """Dense array of 64-bit floats with an optional gradient."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._ctx: Optional[Function] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        return self.data

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        """Constant view sharing storage; gradients stop here."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autodiff ---------------------------------------------------------
    def backward(self, retain_graph: bool = False):
        backward(self, retain_graph=retain_graph)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Mul.apply(self, -1.0)

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    @property
    def T(self):
        return self.transpose()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in reversed(node._ctx.parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False):
    """Populate ``.grad`` on every tensor reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._ctx is not None and loss._ctx.released:
        raise GraphConsumed("graph already consumed by a previous backward()")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    for node in order:
        if node._ctx is not None and node._ctx.released:
            raise GraphConsumed("graph already consumed by a previous backward()")
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None and not g.flags.writeable:
            g = np.array(g)
        node.grad = g if node.grad is None else node.grad + g
        ctx = node._ctx
        if ctx is None:
            continue
        for parent, pg, need in zip(ctx.parents, ctx.backward(g), ctx.needs):
            if pg is None or not need:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    if not retain_graph:
        for node in order:
            if node._ctx is not None:
                node._ctx.release()


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------
class Add(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        self.save(a.shape, b.shape)
        return a + b

    def backward(self, g):
        sa, sb = self.saved
        return unbroadcast(g, sa), unbroadcast(g, sb)


class Sub(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        self.save(a.shape, b.shape)
        return a - b

    def backward(self, g):
        sa, sb = self.saved
        return unbroadcast(g, sa), unbroadcast(-g, sb)


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        self.save(a, b)
        return a * b

    def backward(self, g):
        a, b = self.saved
        ga = unbroadcast(g * b, a.shape) if self.needs[0] else None
        gb = unbroadcast(g * a, b.shape) if self.needs[1] else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        self.save(a, b)
        return a / b

    def backward(self, g):
        a, b = self.saved
        ga = unbroadcast(g / b, a.shape) if self.needs[0] else None
        gb = unbroadcast(-g * a / (b * b), b.shape) if self.needs[1] else None
        return ga, gb


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------
class Exp(Function):
    def forward(self, a):
        y = np.exp(a)
        self.save(y)
        return y

    def backward(self, g):
        (y,) = self.saved
        return (g * y,)


class Log(Function):
    def forward(self, a):
        if np.any(a <= 0):
            raise DomainError("log requires strictly positive input")
        self.save(a)
        return np.log(a)

    def backward(self, g):
        (a,) = self.saved
        return (g / a,)


class Log1p(Function):
    def forward(self, a):
        if np.any(a <= -1):
            raise DomainError("log1p requires input > -1")
        self.save(a)
        return np.log1p(a)

    def backward(self, g):
        (a,) = self.saved
        return (g / (1.0 + a),)


class Expm1(Function):
    def forward(self, a):
        y = np.expm1(a)
        self.save(y)
        return y

    def backward(self, g):
        (y,) = self.saved
        return (g * (y + 1.0),)


class Square(Function):
    def forward(self, a):
        self.save(a)
        return a * a

    def backward(self, g):
        (a,) = self.saved
        return (2.0 * a * g,)


class Sqrt(Function):
    def forward(self, a):
        if np.any(a < 0):
            raise DomainError("sqrt requires non-negative input")
        y = np.sqrt(a)
        self.save(y)
        return y

    def backward(self, g):
        (y,) = self.saved
        return (g / (2.0 * y),)


class Abs(Function):
    def forward(self, a):
        self.save(np.sign(a))
        return np.abs(a)

    def backward(self, g):
        (s,) = self.saved
        return (g * s,)


class Sigmoid(Function):
    def forward(self, a):
        y = np.empty_like(a)
        pos = a >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        y[~pos] = ea / (1.0 + ea)
        self.save(y)
        return y

    def backward(self, g):
        (y,) = self.saved
        return (g * y * (1.0 - y),)


class LeakyRelu(Function):
    def forward(self, a, slope=0.0):
        scale = np.where(a > 0, 1.0, slope)
        self.save(scale)
        return a * scale

    def backward(self, g):
        (scale,) = self.saved
        return (g * scale,)


class Clip(Function):
    """Clamp to [lo, hi]; gradient passes where the input is inside the box."""

    def forward(self, a, lo=None, hi=None):
        inside = np.ones(a.shape, dtype=bool)
        if lo is not None:
            inside &= a >= lo
        if hi is not None:
            inside &= a <= hi
        self.save(inside)
        return np.clip(a, lo, hi)

    def backward(self, g):
        (inside,) = self.saved
        return (g * inside,)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------
def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeMismatch(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        axes = _normalize_axes(axis, a.ndim)
        self.save(a.shape, axes, keepdims)
        return np.sum(a, axis=axes, keepdims=keepdims)

    def backward(self, g):
        shape, axes, keepdims = self.saved
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return Sum.apply(a, axis=axes, keepdims=keepdims) * (1.0 / count)


class Reshape(Function):
    def forward(self, a, shape=()):
        self.save(a.shape)
        try:
            return a.reshape(shape)
        except ValueError as exc:
            raise ShapeMismatch(str(exc)) from exc

    def backward(self, g):
        (shape,) = self.saved
        return (g.reshape(shape),)


class Transpose(Function):
    def forward(self, a, axes=None):
        axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
        self.save(axes)
        return a.transpose(axes)

    def backward(self, g):
        (axes,) = self.saved
        return (g.transpose(np.argsort(axes)),)


class BroadcastTo(Function):
    def forward(self, a, shape=()):
        self.save(a.shape)
        try:
            return np.broadcast_to(a, shape)
        except ValueError as exc:
            raise ShapeMismatch(str(exc)) from exc

    def backward(self, g):
        (shape,) = self.saved
        return (unbroadcast(g, shape),)


class GetItem(Function):
    def forward(self, a, index=None):
        self.save(a.shape, index)
        return a[index]

    def backward(self, g):
        shape, index = self.saved
        out = np.zeros(shape)
        parts = index if isinstance(index, tuple) else (index,)
        if any(isinstance(p, (list, np.ndarray)) for p in parts):
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.save(axis, [a.shape[axis] for a in arrays])
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as exc:
            raise ShapeMismatch(str(exc)) from exc

    def backward(self, g):
        axis, sizes = self.saved
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")
        self.save(a, b)
        return np.matmul(a, b)

    def backward(self, g):
        a, b = self.saved
        ga = gb = None
        if self.needs[0]:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
        if self.needs[1]:
            gb = unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
        return ga, gb


class Softmax(Function):
    def forward(self, a, axis=-1):
        z = a - a.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)
        self.save(y, axis)
        return y

    def backward(self, g):
        y, axis = self.saved
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


# ---------------------------------------------------------------------------
# functional front-end
# ---------------------------------------------------------------------------
def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def div(a, b):
    return Div.apply(a, b)


def exp(a):
    return Exp.apply(a)


def log(a):
    return Log.apply(a)


def log1p(a):
    return Log1p.apply(a)


def expm1(a):
    return Expm1.apply(a)


def square(a):
    return Square.apply(a)


def sqrt(a):
    return Sqrt.apply(a)


def absolute(a):
    return Abs.apply(a)


def sigmoid(a):
    return Sigmoid.apply(a)


def relu(a):
    return LeakyRelu.apply(a, slope=0.0)


def leaky_relu(a, slope=0.2):
    return LeakyRelu.apply(a, slope=slope)


def clip(a, lo=None, hi=None):
    return Clip.apply(a, lo=lo, hi=hi)


def tsum(a, axis=None, keepdims=False):
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def reshape(a, shape):
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a, axes=None):
    return Transpose.apply(a, axes=axes)


def broadcast_to(a, shape):
    return BroadcastTo.apply(a, shape=tuple(shape))


def concat(tensors: Sequence, axis=0):
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence, axis=0):
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        shape = list(t.shape)
        ax = axis if axis >= 0 else len(shape) + 1 + axis
        shape.insert(ax, 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def matmul(a, b):
    return MatMul.apply(a, b)


def softmax(a, axis=-1):
    return Softmax.apply(a, axis=axis)
