"""Dense tensors with a reverse-mode gradient tape.

Every differentiable op builds a :class:`Tensor` that remembers its parents and
a backward rule.  :class:`Tape` orders the recorded graph topologically and
replays the rules in reverse.  Arrays are plain numpy; the default element
type is float32 and :func:`precision` switches it (the verification suite runs
at float64).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, ShapeError

_state = {"dtype": np.float32, "grad": True, "debug": False}


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors and parameters."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


@contextlib.contextmanager
def debug_checks(enabled=True):
    """Raise NumericError as soon as any op produces NaN or Inf."""
    old = _state["debug"]
    _state["debug"] = enabled
    try:
        yield
    finally:
        _state["debug"] = old


def is_grad_enabled():
    return _state["grad"]


class Tensor:
    """A node in the gradient graph.

    ``data`` is a numpy array; ``grad`` is filled on leaves that have
    ``requires_grad`` set once :meth:`backward` runs.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{tag})"

    def __len__(self):
        return self.shape[0]

    def backward(self, grad=None):
        Tape.from_output(self).backward(grad)

    # -- operator sugar ---------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

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


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=default_dtype()), requires_grad=True, name=name)


def _result(data, parents: Sequence[Tensor], backward_fn, op) -> Tensor:
    out = Tensor(data)
    if _state["debug"] and not np.all(np.isfinite(out.data)):
        raise NumericError(f"non-finite output from op '{op}'")
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


class Tape:
    """Topologically ordered record of the operations behind one output.

    ``nodes`` lists every tensor that requires grad, inputs before outputs.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def backward(self, grad=None):
        if not self.nodes:
            return
        out = self.nodes[-1]
        if grad is None:
            if out.size != 1:
                raise ContractError(f"backward() on non-scalar output of shape {out.shape}")
            grad = np.ones_like(out.data)
        grads: dict[int, np.ndarray] = {id(out): np.asarray(grad, dtype=out.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), back, "add")


def sub(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), back, "sub")


def mul(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), back, "mul")


def div(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def back(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return _result(a.data / b.data, (a, b), back, "div")


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    p = float(exponent)

    def back(g):
        return (g * p * a.data ** (p - 1),)

    return _result(a.data**p, (a,), back, "pow")


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------------------
# unary functions


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a):
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(x.dtype, copy=False)

    def back(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return _result(out, (a,), back, "gelu")


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a):
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a, index):
    if isinstance(index, Tensor):
        index = index.data
    out = a.data[index]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, copy=True), (a,), back, "getitem")


def embedding(table, indices):
    """Row lookup; gradient lands only on the rows that were read."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError(f"embedding index out of range [0, {table.shape[0]})")
    return getitem(table, idx)


def concat(tensors: Iterable[Tensor], axis=0):
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} ({exc})") from None
    bounds = np.cumsum([0] + sizes)

    def back(g):
        sl = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _result(out, tensors, back, "concat")


def broadcast_to(a, shape):
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape).copy()
    return _result(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product over the last two axes.

    Either operand may carry leading batch axes; a 2-D operand is shared
    across the other operand's batch.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), back, "matmul")


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else out + bias


# ---------------------------------------------------------------------------
# normalisation


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _result(out, (a,), back, "softmax")


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def back(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), back, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs a trailing dimension of at least 2")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), back, "layer_norm")


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], eps=1e-5,
               indices=None, floor=1e-8, return_details=False):
    """Compare tape gradients against central differences.

    ``fn`` is re-evaluated with each probed entry nudged by ``±eps``; it must
    be deterministic.  ``indices`` optionally maps a parameter position to the
    flat entries to probe (default: all).  The error for one entry is
    ``|tape - fd| / max(|tape|, |fd|, floor)``; the worst one is returned.
    """
    for p in params:
        p.grad = None
    out = fn()
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar output, got shape {out.shape}")
    out.backward()
    tape_grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    details = []
    with no_grad():
        for k, p in enumerate(params):
            p.data = np.ascontiguousarray(p.data).reshape(p.data.shape)
            flat = p.data.reshape(-1)
            probe = range(flat.size) if indices is None or k not in indices else indices[k]
            for i in probe:
                orig = flat[i]
                flat[i] = orig + eps
                up = float(fn().data)
                flat[i] = orig - eps
                down = float(fn().data)
                flat[i] = orig
                fd = (up - down) / (2.0 * eps)
                an = float(tape_grads[k].reshape(-1)[i])
                err = abs(an - fd) / max(abs(an), abs(fd), floor)
                worst = max(worst, err)
                details.append((p.name or f"param{k}", int(i), an, fd, err))
    if return_details:
        return worst, details
    return worst
