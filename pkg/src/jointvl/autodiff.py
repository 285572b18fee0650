"""Reverse-mode automatic differentiation over numpy arrays.

A `Tensor` wraps an ndarray and records the op that produced it; calling
`backward()` on a scalar loss walks the tape once and leaves exact
analytic gradients on every tensor with `requires_grad`. Ops are
vectorized and broadcasting-aware, so whole batches differentiate through
a handful of numpy calls.

Only the primitives the model needs are implemented; everything else
(layer norm, attention, losses) is composed from them and inherits
correct gradients.
"""

import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording (evaluation mode); nesting is fine."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _sum_to_shape(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """An ndarray plus the tape entry that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None

    # ---- basic introspection -------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return (f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")

    def item(self) -> float:
        return float(self.data)

    # ---- arithmetic ------------------------------------------------------
    def __add__(self, other):
        other = _lift(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape

        def vjp(g):
            return (_sum_to_shape(g, a_shape), _sum_to_shape(g, b_shape))

        return _node(self.data + other.data, (self, other), vjp)

    __radd__ = __add__

    def __neg__(self):
        return _node(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = _lift(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape

        def vjp(g):
            return (_sum_to_shape(g, a_shape), _sum_to_shape(-g, b_shape))

        return _node(self.data - other.data, (self, other), vjp)

    def __rsub__(self, other):
        return _lift(other, self.dtype) - self

    def __mul__(self, other):
        other = _lift(other, self.dtype)
        a, b = self.data, other.data

        def vjp(g):
            return (_sum_to_shape(g * b, a.shape), _sum_to_shape(g * a, b.shape))

        return _node(a * b, (self, other), vjp)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other, self.dtype)
        a, b = self.data, other.data

        def vjp(g):
            return (_sum_to_shape(g / b, a.shape),
                    _sum_to_shape(-g * a / (b * b), b.shape))

        return _node(a / b, (self, other), vjp)

    def __rtruediv__(self, other):
        return _lift(other, self.dtype) / self

    def __pow__(self, exponent: float):
        a = self.data

        def vjp(g):
            return (g * exponent * a ** (exponent - 1),)

        return _node(a ** exponent, (self,), vjp)

    def __matmul__(self, other):
        other = _lift(other, self.dtype)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul needs >= 2-D operands")

        def vjp(g):
            ga = np.matmul(g, np.swapaxes(b, -1, -2))
            gb = np.matmul(np.swapaxes(a, -1, -2), g)
            return (_sum_to_shape(ga, a.shape), _sum_to_shape(gb, b.shape))

        return _node(np.matmul(a, b), (self, other), vjp)

    # ---- shape ops -------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _node(self.data.reshape(shape), (self,),
                     lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return _node(self.data.transpose(axes), (self,),
                     lambda g: (g.transpose(inverse),))

    def swapaxes(self, a, b):
        return _node(np.swapaxes(self.data, a, b), (self,),
                     lambda g: (np.swapaxes(g, a, b),))

    def __getitem__(self, idx):
        shape, dtype = self.shape, self.dtype
        fancy = _has_array_index(idx)

        def vjp(g):
            full = np.zeros(shape, dtype=dtype)
            if fancy:
                np.add.at(full, idx, g)
            else:
                full[idx] += g
            return (full,)

        return _node(self.data[idx], (self,), vjp)

    # ---- reductions ------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape, dtype = self.shape, self.dtype

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, shape).astype(dtype, copy=False),)
            g_exp = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g_exp, shape).astype(dtype, copy=False),)

        return _node(self.data.sum(axis=axis, keepdims=keepdims), (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        elif isinstance(axis, tuple):
            count = int(np.prod([self.shape[a] for a in axis]))
        else:
            count = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # ---- backward --------------------------------------------------------
    def backward(self):
        """Compute gradients of this scalar w.r.t. the requires_grad graph.

        Gradients are written (not accumulated) into `.grad`, so repeated
        backward calls never need a zero-grad step.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")

        # Iterative DFS postorder over the requires_grad subgraph; the
        # reverse of `order` is a topological order (consumers first).
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

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                node.grad = None
                continue
            node.grad = g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def _lift(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, vjp) -> Tensor:
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._vjp = vjp
        return out
    return Tensor(data)


def _has_array_index(idx) -> bool:
    if isinstance(idx, tuple):
        return any(isinstance(i, np.ndarray) for i in idx)
    return isinstance(idx, np.ndarray)


# ---- elementwise functions ------------------------------------------------

def exp(t: Tensor) -> Tensor:
    out = np.exp(t.data)
    return _node(out, (t,), lambda g: (g * out,))


def log(t: Tensor) -> Tensor:
    return _node(np.log(t.data), (t,), lambda g: (g / t.data,))


def sqrt(t: Tensor) -> Tensor:
    out = np.sqrt(t.data)
    return _node(out, (t,), lambda g: (g * 0.5 / out,))


def tanh(t: Tensor) -> Tensor:
    out = np.tanh(t.data)
    return _node(out, (t,), lambda g: (g * (1.0 - out * out),))


def sigmoid(t: Tensor) -> Tensor:
    pos = 1.0 / (1.0 + np.exp(-np.abs(t.data)))
    out = np.where(t.data >= 0, pos, 1.0 - pos)
    return _node(out, (t,), lambda g: (g * out * (1.0 - out),))


# python floats (weak promotion) so float32 graphs stay float32
_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(t: Tensor) -> Tensor:
    """Exact (erf-based) GELU; smooth everywhere, so finite differences
    are trustworthy at every point."""
    x = t.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _node(x * cdf, (t,), vjp)


def layernorm(t: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Fused layer normalization over the last axis."""
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    sigma = np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered / sigma
    out = xhat * gain.data + bias.data

    def vjp(g):
        gy = g * gain.data
        gx = (gy - gy.mean(axis=-1, keepdims=True)
              - xhat * (gy * xhat).mean(axis=-1, keepdims=True)) / sigma
        ggain = _sum_to_shape(g * xhat, gain.shape)
        gbias = _sum_to_shape(g, bias.shape)
        return (gx, ggain, gbias)

    return _node(out, (t, gain, bias), vjp)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Softmax stabilized by row-max subtraction."""
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (t,), vjp)


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    z = t.data - t.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (t,), vjp)


# ---- gather / concat / losses ----------------------------------------------

def take(table: Tensor, ids) -> Tensor:
    """Row lookup `table[ids]` (embedding gather) with scatter-add backward."""
    ids = np.asarray(ids)
    shape, dtype = table.shape, table.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _node(table.data[ids], (table,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), vjp)


def bce_with_logits(logit: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy on sigmoid(logit), evaluated in
    the stable logit form max(z,0) - z*y + log(1 + exp(-|z|))."""
    z = logit.data
    y = np.asarray(target, dtype=z.dtype)
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def vjp(g):
        pos = 1.0 / (1.0 + np.exp(-np.abs(z)))
        s = np.where(z >= 0, pos, 1.0 - pos)
        return (g * (s - y),)

    return _node(out, (logit,), vjp)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))
