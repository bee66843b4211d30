"""Minimal reverse-mode differentiation over numpy arrays.

Every differentiable quantity is a :class:`Tensor`. Operations between tensors
are dispatched through a small table of primitives, each a (forward, backward)
pair. When a :class:`Tape` is active, every primitive application is appended
to it as a :class:`Node`, which lets the forward pass be replayed and checked.

Gradients are computed by :func:`backward`, which walks the graph reachable
from a scalar loss in reverse topological order. ``stop_grad`` passes values
through unchanged and contributes nothing backward.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import erf

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Primitive(NamedTuple):
    forward: Callable
    backward: Callable


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` to undo numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _swap_last(x):
    return np.swapaxes(x, -1, -2) if x.ndim >= 2 else x


def _matmul_backward(g, out, vals):
    a, b = vals
    if a.ndim == 1 and b.ndim == 1:
        return [g * b, g * a]
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul on the tape needs both operands 1-D or both >= 2-D")
    ga = g @ _swap_last(b)
    gb = _swap_last(a) @ g
    return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]


def _sum_backward(g, out, vals, axis=None, keepdims=False):
    (x,) = vals
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, x.shape).copy()]


def _softmax_forward(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_backward(g, out, vals, axis=-1):
    return [out * (g - (g * out).sum(axis=axis, keepdims=True))]


def _log_softmax_forward(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _log_softmax_backward(g, out, vals, axis=-1):
    return [g - np.exp(out) * g.sum(axis=axis, keepdims=True)]


def _l2norm_backward(g, out, vals, axis=-1, keepdims=True):
    (x,) = vals
    if not keepdims:
        g = np.expand_dims(g, axis)
        out = np.expand_dims(out, axis)
    return [g * x / out]


def _gelu_backward(g, out, vals):
    (x,) = vals
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return [g * (cdf + x * pdf)]


def _clip_backward(g, out, vals, lo, hi):
    (x,) = vals
    return [g * ((x >= lo) & (x <= hi))]


def _getitem_backward(g, out, vals, index):
    (x,) = vals
    gx = np.zeros_like(x)
    np.add.at(gx, index, g)
    return [gx]


PRIMITIVES: dict[str, Primitive] = {
    "add": Primitive(
        lambda a, b: a + b,
        lambda g, out, v: [_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)],
    ),
    "sub": Primitive(
        lambda a, b: a - b,
        lambda g, out, v: [_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)],
    ),
    "mul": Primitive(
        lambda a, b: a * b,
        lambda g, out, v: [
            _unbroadcast(g * v[1], v[0].shape),
            _unbroadcast(g * v[0], v[1].shape),
        ],
    ),
    "div": Primitive(
        lambda a, b: a / b,
        lambda g, out, v: [
            _unbroadcast(g / v[1], v[0].shape),
            _unbroadcast(-g * v[0] / (v[1] * v[1]), v[1].shape),
        ],
    ),
    "neg": Primitive(lambda a: -a, lambda g, out, v: [-g]),
    "matmul": Primitive(lambda a, b: a @ b, _matmul_backward),
    "exp": Primitive(np.exp, lambda g, out, v: [g * out]),
    "log": Primitive(np.log, lambda g, out, v: [g / v[0]]),
    "sqrt": Primitive(np.sqrt, lambda g, out, v: [g * 0.5 / out]),
    "sum": Primitive(
        lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims),
        _sum_backward,
    ),
    "softmax": Primitive(_softmax_forward, _softmax_backward),
    "log_softmax": Primitive(_log_softmax_forward, _log_softmax_backward),
    "l2norm": Primitive(
        lambda a, axis=-1, keepdims=True: np.sqrt(np.sum(a * a, axis=axis, keepdims=keepdims)),
        _l2norm_backward,
    ),
    "stop_grad": Primitive(lambda a: a.copy(), lambda g, out, v: [None]),
    "reshape": Primitive(
        lambda a, shape: a.reshape(shape),
        lambda g, out, v, shape: [g.reshape(v[0].shape)],
    ),
    "transpose": Primitive(
        lambda a, axes=None: np.transpose(a, axes),
        lambda g, out, v, axes=None: [
            np.transpose(g, None if axes is None else np.argsort(axes))
        ],
    ),
    "gelu": Primitive(lambda a: 0.5 * a * (1.0 + erf(a / _SQRT_2)), _gelu_backward),
    "clip": Primitive(lambda a, lo, hi: np.clip(a, lo, hi), _clip_backward),
    "getitem": Primitive(lambda a, index: a[index], _getitem_backward),
}


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    attrs: dict
    output: "Tensor | None" = None


_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


@dataclass(eq=False)
class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; tapes are per-thread and may be nested (the
    innermost one records).
    """

    nodes: list = field(default_factory=list)

    def __enter__(self):
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def __len__(self):
        return len(self.nodes)

    def replay(self):
        """Re-run every recorded forward; return True iff all outputs match bitwise."""
        for node in self.nodes:
            vals = [t.value for t in node.inputs]
            out = PRIMITIVES[node.op].forward(*vals, **node.attrs)
            if not np.array_equal(out, node.output.value):
                return False
        return True

    def ops(self):
        return [n.op for n in self.nodes]


class Tensor:
    """A float64 array with an optional link to the primitive that produced it."""

    __array_ufunc__ = None
    __slots__ = ("value", "requires_grad", "grad", "node", "name")

    def __init__(self, value, requires_grad=False, name=None, _node=None):
        arr = np.array(value, dtype=np.float64)
        arr.setflags(write=False)
        self.value = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.node = _node
        self.name = name

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self):
        return float(self.value)

    def numpy(self):
        return self.value

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return apply("add", self, other)

    def __radd__(self, other):
        return apply("add", other, self)

    def __sub__(self, other):
        return apply("sub", self, other)

    def __rsub__(self, other):
        return apply("sub", other, self)

    def __mul__(self, other):
        return apply("mul", self, other)

    def __rmul__(self, other):
        return apply("mul", other, self)

    def __truediv__(self, other):
        return apply("div", self, other)

    def __rtruediv__(self, other):
        return apply("div", other, self)

    def __neg__(self):
        return apply("neg", self)

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def __rmatmul__(self, other):
        return apply("matmul", other, self)

    def __getitem__(self, index):
        return apply("getitem", self, index=index)

    @property
    def T(self):
        return apply("transpose", self)

    def sum(self, axis=None, keepdims=False):
        return apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else np.prod(
            [self.value.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", self, shape=shape)

    def transpose(self, *axes):
        return apply("transpose", self, axes=axes or None)

    def exp(self):
        return apply("exp", self)

    def log(self):
        return apply("log", self)

    def sqrt(self):
        return apply("sqrt", self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _wrap(value, requires_grad, node):
    out = Tensor.__new__(Tensor)
    value.setflags(write=False)
    out.value = value
    out.requires_grad = requires_grad
    out.grad = None
    out.node = node
    out.name = None
    return out


def apply(op, *inputs, **attrs):
    """Apply primitive ``op`` to ``inputs`` and record it on the active tape."""
    tensors = tuple(x if isinstance(x, Tensor) else Tensor(x) for x in inputs)
    out_val = PRIMITIVES[op].forward(*[t.value for t in tensors], **attrs)
    if not isinstance(out_val, np.ndarray) or out_val.dtype != np.float64:
        out_val = np.array(out_val, dtype=np.float64)
    needs_grad = op != "stop_grad" and any(t.requires_grad for t in tensors)
    tape = getattr(_state, "tape", None)
    if not needs_grad and tape is None:
        return _wrap(out_val, False, None)
    node = Node(op, tensors, attrs)
    out = _wrap(out_val, needs_grad, node if needs_grad else None)
    node.output = out
    if tape is not None:
        tape.nodes.append(node)
    return out


# functional forms of the primitives
def exp(x):
    return apply("exp", x)


def log(x):
    return apply("log", x)


def sqrt(x):
    return apply("sqrt", x)


def softmax(x, axis=-1):
    return apply("softmax", x, axis=axis)


def log_softmax(x, axis=-1):
    return apply("log_softmax", x, axis=axis)


def l2norm(x, axis=-1, keepdims=True):
    return apply("l2norm", x, axis=axis, keepdims=keepdims)


def stop_grad(x):
    return apply("stop_grad", x)


def gelu(x):
    return apply("gelu", x)


def clip(x, lo, hi):
    return apply("clip", x, lo=lo, hi=hi)


def transpose(x, axes=None):
    return apply("transpose", x, axes=axes)


def swap_last(x):
    axes = list(range(as_tensor(x).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return apply("transpose", x, axes=tuple(axes))


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf tensor."""
    if loss.value.size != 1:
        raise ValueError("backward() needs a scalar loss")
    grads = {id(loss): np.ones_like(loss.value)}
    order = _toposort(loss)
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g if t.grad is None else t.grad + g
            continue
        node = t.node
        vals = [x.value for x in node.inputs]
        parts = PRIMITIVES[node.op].backward(g, node.output.value, vals, **node.attrs)
        for parent, pg in zip(node.inputs, parts):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad(loss_fn, params):
    """Return (loss value, list of gradients) of ``loss_fn(*params)``.

    ``params`` are numpy arrays; each is wrapped as a fresh leaf tensor.
    Parameters the loss does not depend on get an all-zero gradient.
    """
    leaves = [Tensor(p, requires_grad=True) for p in params]
    loss = loss_fn(*leaves)
    if loss.requires_grad:
        backward(loss)
    grads = [np.zeros_like(l.value) if l.grad is None else l.grad for l in leaves]
    return loss.item(), grads
