"""Define-by-run reverse-mode automatic differentiation over numpy arrays.

Every operation on a :class:`Tensor` that involves at least one input with
``requires_grad`` records a node holding its parents and a vector-Jacobian
product closure. :meth:`Tensor.backward` walks the recorded graph in reverse
topological order. All data is float64.
"""

import contextlib
import itertools

import numpy as np

from .errors import ShapeError, UsageError

_ids = itertools.count()
_recording = [True]


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording tape nodes (inference)."""
    prev = _recording[0]
    _recording[0] = False
    try:
        yield
    finally:
        _recording[0] = prev


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "node_id")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self.node_id = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise UsageError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic -----------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents, vjp):
    """Create an op output; ``vjp(g)`` returns one gradient (or None) per parent."""
    out = Tensor(data)
    if _recording[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out.node_id = next(_ids)
    return out


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return make_node(data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return make_node(data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return make_node(
        data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                   _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return make_node(
        data, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                   _unbroadcast(-g * data / b.data, b.shape) if b.requires_grad else None),
    )


def power(a, exponent):
    a = as_tensor(a)
    e = float(exponent)
    data = a.data**e
    return make_node(data, (a,), lambda g: (g * e * a.data ** (e - 1.0),))


def matmul(a, b):
    """Batched matrix product; both operands need at least two dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}") from exc

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(data, (a, b), vjp)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(data, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return make_node(data, (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, i, j):
    a = as_tensor(a)
    return make_node(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a, idx):
    a = as_tensor(a)
    data = a.data[idx]
    basic = _is_basic_index(idx)

    def vjp(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_node(data, (a,), vjp)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_node(data, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    n = len(tensors)
    return make_node(data, tensors,
                     lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def unary(a, f, df):
    """Elementwise ``f`` with derivative ``df``; both map arrays to arrays."""
    a = as_tensor(a)
    return make_node(f(a.data), (a,), lambda g: (g * df(a.data),))


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)
    return make_node(data, (a,), lambda g: (g * data,))


def log(a):
    a = as_tensor(a)
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    data = np.sqrt(a.data)
    return make_node(data, (a,), lambda g: (0.5 * g / data,))


def sin(a):
    return unary(a, np.sin, np.cos)


def cos(a):
    return unary(a, np.cos, lambda x: -np.sin(x))


def tanh(a):
    a = as_tensor(a)
    data = np.tanh(a.data)
    return make_node(data, (a,), lambda g: (g * (1.0 - data * data),))


def sigmoid(a):
    a = as_tensor(a)
    data = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_node(data, (a,), lambda g: (g * data * (1.0 - data),))


def softplus(a):
    a = as_tensor(a)
    data = np.logaddexp(0.0, a.data)
    return make_node(data, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * a.data)),))


def elu(a, alpha=1.0):
    a = as_tensor(a)
    pos = a.data > 0
    neg = alpha * np.expm1(np.minimum(a.data, 0.0))
    data = np.where(pos, a.data, neg)
    return make_node(data, (a,), lambda g: (g * np.where(pos, 1.0, neg + alpha),))


def frobenius_norm(a, axis=None, keepdims=False):
    """Euclidean norm over ``axis`` (all entries by default); zero-safe gradient."""
    a = as_tensor(a)
    data = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=keepdims))

    def vjp(g):
        n = data if keepdims or axis is None else np.expand_dims(data, axis)
        gg = g if keepdims or axis is None else np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, gg * a.data / safe, 0.0),)

    return make_node(data, (a,), vjp)


def cross(a, b):
    """Cross product along the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    data = np.cross(a.data, b.data)
    return make_node(
        data, (a, b),
        lambda g: (_unbroadcast(np.cross(b.data, g), a.shape) if a.requires_grad else None,
                   _unbroadcast(np.cross(g, a.data), b.shape) if b.requires_grad else None),
    )


def hat(v):
    """``(..., 3) -> (..., 3, 3)`` skew-symmetric matrices."""
    v = as_tensor(v)
    x, y, z = v.data[..., 0], v.data[..., 1], v.data[..., 2]
    data = np.zeros(v.shape[:-1] + (3, 3))
    data[..., 0, 1], data[..., 0, 2] = -z, y
    data[..., 1, 0], data[..., 1, 2] = z, -x
    data[..., 2, 0], data[..., 2, 1] = -y, x

    def vjp(g):
        return (np.stack([g[..., 2, 1] - g[..., 1, 2], g[..., 0, 2] - g[..., 2, 0],
                          g[..., 1, 0] - g[..., 0, 1]], axis=-1),)

    return make_node(data, (v,), vjp)


def where(cond, a, b):
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    data = np.where(cond, a.data, b.data)
    return make_node(data, (a, b),
                     lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                                _unbroadcast(np.where(cond, 0.0, g), b.shape)))


def numerical_gradient(fn, inputs, h=1e-6):
    """Central differences of scalar ``fn()`` w.r.t. each array in ``inputs``.

    Inputs are perturbed in place; the step is scaled by ``max(1, |x|)``.
    """
    grads = []
    for x in inputs:
        g = np.zeros_like(x)
        it = np.nditer(x, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = x[i]
            step = h * max(1.0, abs(old))
            x[i] = old + step
            fp = fn()
            x[i] = old - step
            fm = fn()
            x[i] = old
            g[i] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def relative_error(a, b, floor=1e-8):
    """Max entrywise ``|a - b| / max(|a|, |b|, floor * max|b|)``."""
    a, b = np.asarray(a), np.asarray(b)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor * max(np.abs(b).max(), 1e-300))
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0
