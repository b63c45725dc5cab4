"""A small reverse-mode autodiff engine over numpy arrays.

Each :class:`Tensor` records the tensors it was computed from and a closure
that pushes its gradient back to them. ``backward`` walks the graph once in
reverse topological order.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dmseg.errors import ShapeError, StateError

DEFAULT_DTYPE = np.float32


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, _parents=(), op: str = "", name: str = ""):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(DEFAULT_DTYPE)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = None
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise StateError("backward on a non-scalar tensor needs an explicit output gradient")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"output gradient shape {grad.shape} != tensor shape {self.shape}")

        order = []
        seen = set()
        stack = [(self, False)]
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

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: keep the gradient
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.data.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.data.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return mul(self, power(as_tensor(other, self.data.dtype), -1.0))

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _node(data, parents, backward, op) -> Tensor:
    out = Tensor(data, _parents=tuple(parents), op=op)
    if out.requires_grad:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.data.dtype)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.data.dtype)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _node(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), f"pow{exponent}")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _node(a.data * keep, (a,), lambda g: (g * keep,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), backward, "softmax")


def activate(x: Tensor, kind: str | None) -> Tensor:
    if kind in (None, "none", "linear"):
        return x
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "softmax":
        return softmax(x, axis=1)
    raise ValueError(f"unknown activation {kind!r}")


# -- reductions and shape ops ---------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _node(np.asarray(out), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size / np.asarray(a.data.sum(axis=axis, keepdims=keepdims)).size
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def external(inputs, value: float, grads) -> Tensor:
    """Scalar node whose input gradients were computed outside the graph.

    Used to attach losses that come with their own analytic gradients.
    """
    inputs = tuple(inputs)
    grads = tuple(None if g is None else np.asarray(g) for g in grads)
    dtype = inputs[0].data.dtype if inputs else DEFAULT_DTYPE

    def backward(g):
        scale = float(np.asarray(g).reshape(()))
        return tuple(None if gr is None else (gr * scale).astype(dtype) for gr in grads)

    return _node(np.asarray(value, dtype=dtype), inputs, backward, "external")


# -- volumetric ops -----------------------------------------------------------

def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int | None = None) -> Tensor:
    """Cross-correlation of ``x (B,C,Z,Y,X)`` with ``w (O,C,k,k,k)``, zero padding ``k // 2``."""
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d expects 5D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    B, C, Z, Y, X = x.shape
    O, k = w.shape[0], w.shape[2]
    p = k // 2 if padding is None else padding
    s = stride
    # channels-last im2col, rows (b, z, y, x), columns (dz, dy, dx, c); kept for backward
    xp = _pad(x.data, p).transpose(0, 2, 3, 4, 1)
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))[:, ::s, ::s, ::s]
    zo, yo, xo = win.shape[1:4]
    cols = win.transpose(0, 1, 2, 3, 5, 6, 7, 4).reshape(B * zo * yo * xo, k * k * k * C)
    wmat = w.data.transpose(0, 2, 3, 4, 1).reshape(O, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(B, zo, yo, xo, O).transpose(0, 4, 1, 2, 3))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 4, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(O, k, k, k, C).transpose(0, 4, 1, 2, 3)
        gb = g2.sum(axis=0) if b is not None else None
        gcols = (g2 @ wmat).reshape(B, zo, yo, xo, k, k, k, C)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for dz in range(k):
            for dy in range(k):
                for dx in range(k):
                    gxp[:,
                        dz:dz + s * (zo - 1) + 1:s,
                        dy:dy + s * (yo - 1) + 1:s,
                        dx:dx + s * (xo - 1) + 1:s] += gcols[:, :, :, :, dz, dy, dx]
        gx = gxp[:, p:p + Z, p:p + Y, p:p + X].transpose(0, 4, 1, 2, 3)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, backward, "conv3d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    out = x.data
    for axis in (2, 3, 4):
        out = np.repeat(out, factor, axis=axis)

    def backward(g):
        B, C, Z, Y, X = x.shape
        return (g.reshape(B, C, Z, factor, Y, factor, X, factor).sum(axis=(3, 5, 7)),)

    return _node(out, (x,), backward, "upsample")


def max_pool3d(x: Tensor, factor: int = 2) -> Tensor:
    B, C, Z, Y, X = x.shape
    if Z % factor or Y % factor or X % factor:
        raise ShapeError(f"max_pool3d needs spatial dims divisible by {factor}, got {x.shape[2:]}")
    blocks = x.data.reshape(B, C, Z // factor, factor, Y // factor, factor, X // factor, factor)
    out = blocks.max(axis=(3, 5, 7))

    def backward(g):
        expanded = out[:, :, :, None, :, None, :, None]
        hit = blocks == expanded
        # ties split the gradient so the total is preserved
        share = hit / hit.sum(axis=(3, 5, 7), keepdims=True)
        return ((share * g[:, :, :, None, :, None, :, None]).reshape(x.shape),)

    return _node(out, (x,), backward, "maxpool")
