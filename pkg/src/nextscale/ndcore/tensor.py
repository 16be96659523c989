"""Reverse-mode tensors on numpy arrays.

Every operation records its parents and a backward closure on the node it
produces; ``Tensor.backward`` replays the tape in reverse topological
order. Operations preserve the dtype of their inputs (float64 graphs for
gradient checks, float32 for training), and scalar constants are folded
in as Python floats so they never promote the dtype.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


def _shape_fail(op: str, *shapes) -> None:
    raise ShapeError(f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes))


class Tensor:
    """A numpy array plus an optional gradient buffer and tape record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def __getitem__(self, key):
        return slice_(self, key)

    # -- backward -------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into the grad buffer of every
        reachable tensor that requires grad. ``self`` must be scalar.
        Repeated calls without clearing grads accumulate.
        """
        if self.data.ndim != 0:
            raise ShapeError(f"backward: loss must be scalar, got shape {self.shape}")

        order = _toposort(self)
        cot = {id(self): np.ones((), dtype=self.data.dtype)}
        for node in order:
            g = cot.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in cot:
                    cot[key] = cot[key] + pg
                else:
                    cot[key] = pg


def _toposort(root: Tensor):
    """Iterative postorder over the tape, returned in reverse (root first)."""
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
    order.reverse()
    return order


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that suspends tape recording (inference paths)."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


def _wrap(value, op: str, parents, backward) -> Tensor:
    out = Tensor(value)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def constant(value, like: Tensor | None = None) -> Tensor:
    """A non-differentiable tensor, cast to the dtype of ``like`` if given."""
    arr = np.asarray(value)
    if like is not None:
        arr = arr.astype(like.dtype)
    return Tensor(arr)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise --------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)
    try:
        out = a.data + b.data
    except ValueError:
        _shape_fail("add", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _wrap(out, "add", (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)
    try:
        out = a.data - b.data
    except ValueError:
        _shape_fail("sub", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _wrap(out, "sub", (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        return (-g,)

    return _wrap(-a.data, "neg", (a,), backward)


def mul(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    if isinstance(b, (int, float)):
        s = float(b)

        def backward_scalar(g):
            return (g * s,)

        return _wrap(a.data * s, "mul", (a,), backward_scalar)

    b = _as_tensor(b, a)
    try:
        out = a.data * b.data
    except ValueError:
        _shape_fail("mul", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _wrap(out, "mul", (a, b), backward)


def div(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / float(b))
    b = _as_tensor(b, a)
    try:
        out = a.data / b.data
    except ValueError:
        _shape_fail("div", a.shape, b.shape)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _wrap(out, "div", (a, b), backward)


def pow_const(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data ** p

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _wrap(out, "pow", (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _wrap(out, "exp", (a,), backward)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _wrap(out, "log", (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # computed via the numerically stable split so large |x| do not overflow
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _wrap(out, "sigmoid", (a,), backward)


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(a: Tensor) -> Tensor:
    """Exact erf-based GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return _wrap(out.astype(x.dtype, copy=False), "gelu", (a,), backward)


# -- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        _shape_fail("reshape", a.shape, shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _wrap(out, "reshape", (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    # materialized so downstream BLAS calls see contiguous operands
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    inv = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _wrap(out, "transpose", (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        _shape_fail("concat", *[t.shape for t in tensors])
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _wrap(out, "concat", tuple(tensors), backward)


def _is_basic_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (slice, int)) or p is Ellipsis for p in parts)


def slice_(a: Tensor, key) -> Tensor:
    out = a.data[key]
    basic = _is_basic_key(key)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            # basic indexing touches each element at most once
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _wrap(out, "slice", (a,), backward)


# -- contractions and reductions ----------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        _shape_fail("matmul", a.shape, b.shape)
    try:
        out = a.data @ b.data
    except ValueError:
        _shape_fail("matmul", a.shape, b.shape)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _wrap(out, "matmul", (a, b), backward)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _wrap(out, "sum", (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in ax]))
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def squared_error(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences, reduced to a scalar."""
    d = sub(a, b)
    return tensor_sum(mul(d, d))


# -- row-normalized nonlinearities ---------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _wrap(out, "softmax", (a,), backward)


def masked_softmax(a: Tensor, allowed: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over positions where ``allowed`` is True; disallowed
    positions are exactly zero in the output and receive zero gradient,
    so values there can never influence the result (required for the
    exact block-causality guarantee). Rows must have at least one
    allowed position.
    """
    x = a.data
    allowed_b = np.broadcast_to(np.asarray(allowed, dtype=bool), x.shape)
    xm = np.where(allowed_b, x, -np.inf)
    m = xm.max(axis=axis, keepdims=True)
    with np.errstate(invalid="ignore"):
        e = np.exp(xm - m)  # exp(-inf) is exactly 0 at masked positions
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _wrap(out, "masked_softmax", (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _wrap(out, "log_softmax", (a,), backward)


def take_last_axis(a: Tensor, indices: np.ndarray) -> Tensor:
    """Pick one entry per row along the last axis (for class losses)."""
    idx = np.asarray(indices)
    if idx.shape != a.shape[:-1]:
        _shape_fail("take_last_axis", a.shape, idx.shape)
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _wrap(out, "take_last_axis", (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with learned gain and bias."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        _shape_fail("layer_norm", x.shape, gain.shape, bias.shape)
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = pow_const(add(var, constant(eps, like=x)), -0.5)
    return add(mul(mul(centered, inv), gain), bias)
