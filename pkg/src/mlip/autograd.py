"""Reverse-mode differentiation over numpy arrays.

Only the operations the MLIP losses need are provided.  Each one records its
parents and a closure mapping the output gradient to parent gradients; calling
:meth:`Var.backward` on a scalar walks the tape in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nm

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no tape inside the block; results are constants."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Var:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    # make numpy defer to the reflected operators (ndarray @ Var -> Var.__rmatmul__)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Var):
            data = data.data
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(nm.get_dtype())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Var", ...] = ()
        self._backward: Optional[Callable] = None
        self.name = name

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self) -> "Var":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_wrap(other), self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    # backprop ---------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Var):
    order = []
    seen = set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=nm.get_dtype()))


def _make(data: np.ndarray, parents: Sequence[Var], backward: Callable) -> Var:
    out = Var(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def const(x) -> Var:
    return Var(np.asarray(x.data if isinstance(x, Var) else x))


def stop_gradient(x: Var) -> Var:
    return Var(x.data)


# elementwise ----------------------------------------------------------


def add(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def neg(a: Var) -> Var:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw)


def exp(a: Var) -> Var:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Var) -> Var:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Var) -> Var:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Var) -> Var:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Var) -> Var:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(out, (a,), bw)


def clamp_min(a: Var, floor: float) -> Var:
    mask = a.data > floor
    return _make(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


# reductions and shapes -------------------------------------------------


def vsum(a: Var, axis=None, keepdims=False) -> Var:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def vmean(a: Var, axis=None, keepdims=False) -> Var:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return vsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Var, shape) -> Var:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Var, axes=None) -> Var:
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Var, idx) -> Var:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw)


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    parts = [_wrap(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def broadcast_to(a: Var, shape) -> Var:
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),))


# linear algebra ---------------------------------------------------------


def matmul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw)


def einsum(subscripts: str, *operands) -> Var:
    """Einsum without repeated indices inside one operand."""
    operands = [_wrap(o) for o in operands]
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    for s in in_subs:
        if len(set(s)) != len(s):
            raise ValueError(f"repeated index in operand {s!r} is not supported")
    out = np.einsum(subscripts, *[o.data for o in operands])

    def bw(g):
        grads = []
        for i, (s_i, op) in enumerate(zip(in_subs, operands)):
            if not op.requires_grad:
                grads.append(None)
                continue
            others = [(s, o.data) for j, (s, o) in enumerate(zip(in_subs, operands)) if j != i]
            available = set(out_sub).union(*[set(s) for s, _ in others]) if others else set(out_sub)
            present = "".join(c for c in s_i if c in available)
            spec = ",".join([out_sub] + [s for s, _ in others]) + "->" + present
            gp = np.einsum(spec, g, *[d for _, d in others])
            if present != s_i:
                expand = [slice(None) if c in available else None for c in s_i]
                gp = np.broadcast_to(gp[tuple(expand)], op.shape).copy()
            grads.append(gp)
        return tuple(grads)

    return _make(out, operands, bw)


# fused normalizations -----------------------------------------------------


def softmax(a: Var, axis: int = -1) -> Var:
    out = nm.softmax(a.data, axis=axis)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def log_softmax(a: Var, axis: int = -1) -> Var:
    out = nm.log_softmax(a.data, axis=axis)

    def bw(g):
        p = np.exp(out)
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, (a,), bw)


def layer_norm(a: Var, epsilon: float = 1e-5) -> Var:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + epsilon)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _make(y, (a,), bw)


def l2_normalize(a: Var, axis: int = -1, eps: float = 1e-12) -> Var:
    n = np.maximum(np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True)), eps)
    y = a.data / n

    def bw(g):
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / n,)

    return _make(y, (a,), bw)
