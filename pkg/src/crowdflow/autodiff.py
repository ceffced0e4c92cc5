"""Define-by-run reverse-mode automatic differentiation over float64 arrays.

Every operation returns a new :class:`Value`.  When at least one operand
tracks gradients (and gradient recording is enabled), the result keeps a
reference to its parents and a closure mapping the output gradient to the
parent gradients.  :meth:`Value.backward` walks the graph once in reverse
topological order.

Only leaf values accumulate into ``.grad`` across calls; intermediate
gradients are recomputed on every pass, so calling ``backward`` twice on the
same graph doubles the leaf gradients exactly.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Value",
    "ShapeError",
    "no_grad",
    "grad_enabled",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "linear",
    "concat",
    "take",
    "segment_sum",
    "segment_mean",
    "vsum",
    "vmean",
    "relu",
    "tanh",
    "sigmoid",
    "vexp",
    "square",
    "softmax",
    "masked_softmax",
    "layer_norm",
    "where",
    "safe_normalize",
    "reshape",
    "numerical_grad",
    "max_relative_error",
    "check_gradients",
]

MAX_RANK = 4

_grad_enabled = True


class ShapeError(ValueError):
    """Operands of incompatible shape."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Value:
    """A node of the computation graph holding a dense float64 array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Value, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Value(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> Value:
        return Value(self.data)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every gradient-tracking leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
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
    return order


def constant(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _make(data: np.ndarray, parents: tuple[Value, ...], backward: Callable) -> Value:
    # results are freshly allocated by numpy; skip the constructor's copy
    out = Value.__new__(Value)
    out.data = np.asarray(data, dtype=np.float64)
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(a: Value, b: Value, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise arithmetic


def add(a, b) -> Value:
    a, b = constant(a), constant(b)
    _broadcast_check(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Value:
    a, b = constant(a), constant(b)
    _broadcast_check(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Value:
    a, b = constant(a), constant(b)
    _broadcast_check(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward)


def div(a, b) -> Value:
    a, b = constant(a), constant(b)
    _broadcast_check(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), backward)


def square(x) -> Value:
    return mul(x, x)


# linear algebra


def matmul(a, b) -> Value:
    """``a @ b`` for ``a`` of shape (..., n) and a 2-D ``b`` of shape (n, m)."""
    a, b = constant(a), constant(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T
        a2 = ad.reshape(-1, ad.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        return ga, a2.T @ g2

    return _make(ad @ bd, (a, b), backward)


def linear(x, weight, bias=None) -> Value:
    """Affine map ``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    x, weight = constant(x), constant(weight)
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input shape {x.shape} does not match weight shape {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents: tuple[Value, ...] = (x, weight)
    if bias is not None:
        bias = constant(bias)
        if bias.shape != (wd.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape} does not match weight shape {weight.shape}")
        out = out + bias.data
        parents = (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        grads = [g @ wd, g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, backward)


# structural ops


def concat(values: Sequence, axis: int = -1) -> Value:
    vals = [constant(v) for v in values]
    if not vals:
        raise ShapeError("concat: no operands")
    try:
        out = np.concatenate([v.data for v in vals], axis=axis)
    except ValueError:
        shapes = " and ".join(str(v.shape) for v in vals)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])

    def backward(g):
        grads = []
        for i in range(len(vals)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _make(out, tuple(vals), backward)


def _has_array_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def _index(x: Value, idx) -> Value:
    xd = x.data
    out = xd[idx]
    fancy = _has_array_index(idx)

    def backward(g):
        full = np.zeros_like(xd)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return _make(np.array(out, dtype=np.float64), (x,), backward)


def take(x, indices: np.ndarray) -> Value:
    """Gather rows along axis 0; ``indices`` may have any shape."""
    x = constant(x)
    indices = np.asarray(indices, dtype=np.intp)
    xd = x.data

    def backward(g):
        full = np.zeros_like(xd)
        np.add.at(full, indices.reshape(-1), g.reshape((-1,) + xd.shape[1:]))
        return (full,)

    return _make(xd[indices], (x,), backward)


def segment_sum(x, segments: np.ndarray, n_segments: int) -> Value:
    """Sum rows of ``x`` into ``n_segments`` buckets given by ``segments``."""
    x = constant(x)
    segments = np.asarray(segments, dtype=np.intp)
    if segments.shape != x.shape[:1]:
        raise ShapeError(f"segment_sum: segment ids of shape {segments.shape} for rows of shape {x.shape}")
    out = np.zeros((n_segments,) + x.shape[1:])
    np.add.at(out, segments, x.data)
    return _make(out, (x,), lambda g: (g[segments],))


def segment_mean(x, segments: np.ndarray, n_segments: int) -> Value:
    """Mean of rows per bucket; empty buckets yield zero."""
    segments = np.asarray(segments, dtype=np.intp)
    counts = np.bincount(segments, minlength=n_segments).astype(np.float64)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    total = segment_sum(x, segments, n_segments)
    return mul(total, inv.reshape((-1,) + (1,) * (total.ndim - 1)))


def reshape(x, shape) -> Value:
    x = constant(x)
    orig = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {orig} into {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(orig),))


# reductions


def vsum(x, axis=None, keepdims: bool = False) -> Value:
    x = constant(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), backward)


def vmean(x, axis=None, keepdims: bool = False) -> Value:
    x = constant(x)
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(vsum(x, axis, keepdims), 1.0 / max(n, 1))


# nonlinearities


def relu(x) -> Value:
    x = constant(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x) -> Value:
    x = constant(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Value:
    x = constant(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def vexp(x) -> Value:
    x = constant(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def softmax(x, axis: int = -1) -> Value:
    x = constant(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def masked_softmax(x, mask: np.ndarray, axis: int = -1) -> Value:
    """Softmax over entries where ``mask`` is true; fully masked rows give zeros."""
    x = constant(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    z = np.where(mask, x.data, -np.inf)
    zmax = z.max(axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x.data, 0.0) - zmax), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    out = np.where(denom > 0, e / np.where(denom > 0, denom, 1.0), 0.0)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def layer_norm(x, eps: float = 1e-5) -> Value:
    """Normalize the last axis to zero mean and unit variance (no affine part)."""
    x = constant(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    sigma = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc / sigma

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return ((g - gm - xhat * gx) / sigma,)

    return _make(xhat, (x,), backward)


def where(mask: np.ndarray, a, b) -> Value:
    """Elementwise select; ``mask`` is a constant boolean array."""
    a, b = constant(a), constant(b)
    _broadcast_check(a, b, "where")
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        g = np.broadcast_to(g, out.shape)
        return _unbroadcast(np.where(mask, g, 0.0), sa), _unbroadcast(np.where(mask, 0.0, g), sb)

    return _make(out, (a, b), backward)


def safe_normalize(x, eps: float = 1e-12) -> Value:
    """Unit-normalize along the last axis; vectors with norm <= eps map to zero."""
    x = constant(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    ok = norm > eps
    safe = np.where(ok, norm, 1.0)
    out = np.where(ok, x.data / safe, 0.0)

    def backward(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(ok, (g - out * proj) / safe, 0.0),)

    return _make(out, (x,), backward)


# finite-difference tooling


def numerical_grad(f: Callable[[], Value], params: Iterable[Value], h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of the scalar ``f()`` w.r.t. each param's data."""
    results = []
    with no_grad():
        for p in params:
            grad = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                gflat[i] = (fp - fm) / (2.0 * h)
            results.append(grad)
    return results


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Largest elementwise deviation, relative to the larger gradient magnitude.

    The scale is the max-abs entry over both arrays (floored), so entries that
    are tiny compared to the rest of the gradient do not dominate.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(f: Callable[[], Value], params: Sequence[Value], rng: np.random.Generator | None = None,
                    max_coords: int | None = None, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Largest relative error between backprop and central differences over ``params``.

    With ``max_coords`` only that many randomly chosen entries per parameter
    are perturbed.  Errors are relative to the largest gradient magnitude over
    all checked entries (floored at ``floor``), so parameters whose gradient
    is exactly zero are compared against the overall scale.
    """
    for p in params:
        p.zero_grad()
    f().backward()
    analytic_all, numeric_all = [], []
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            analytic = (np.zeros_like(p.data) if p.grad is None else p.grad).reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            numeric = np.zeros(len(idx))
            for n, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                numeric[n] = (fp - fm) / (2.0 * h)
            analytic_all.append(analytic[idx])
            numeric_all.append(numeric)
    if not analytic_all:
        return 0.0
    return max_relative_error(np.concatenate(analytic_all), np.concatenate(numeric_all), floor)
