"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

A `Tensor` wraps an ndarray and remembers how it was produced; `backward`
walks the graph in reverse topological order and accumulates gradients into
every node that requires them. Graphs are built per forward pass and freed
after backward. Everything is float64; there is no device or dtype story.

Gradient convention: `t.grad` is None until something flows into it, and a
None grad means zero. Constants (requires_grad=False, e.g. the output of
`stop_gradient`) never receive gradient at all.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "parameter",
    "stop_gradient",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "pow_scalar",
    "exp",
    "log",
    "relu",
    "tensor_sum",
    "tensor_mean",
    "reshape",
    "transpose",
    "concat",
    "gather_rows",
    "gather_last",
    "select_last",
    "softmax",
    "log_softmax",
    "sigmoid",
    "layer_norm",
    "dropout",
    "backward",
]


class Tensor:
    """A node in the dynamic computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop", "_grad_owned")

    def __init__(self, data, requires_grad=False, _parents=(), _backprop=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backprop = _backprop
        self._grad_owned = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self):
        """Return a constant sharing this tensor's data (the stop-gradient op)."""
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward(self)

    def _accumulate(self, g):
        # copy-on-write: the first contribution may alias another node's
        # buffer; only a second contribution forces a fresh allocation, and
        # in-place += happens only on buffers this node allocated itself.
        if self.grad is None:
            self.grad = g
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    # operator sugar; scalars and arrays are promoted to constants
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def parameter(data):
    return Tensor(data, requires_grad=True)


def stop_gradient(t):
    """Block gradient flow: the result is a constant with the same values."""
    return t.detach() if isinstance(t, Tensor) else Tensor(t)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_graph(*tensors):
    return any(t.requires_grad for t in tensors)


def _node(data, parents, backprop):
    if _needs_graph(*parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backprop=backprop)
    return Tensor(data)


def _unbroadcast(g, shape):
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss):
    """Run reverse-mode accumulation from a scalar loss node.

    Raises ValueError if the node is not a scalar. After the pass, graph
    edges are dropped so intermediate arrays can be collected.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    # iterative topological sort (graphs can be deep during long unrolls)
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backprop is not None:
            node._backprop(node.grad)
            node._parents = ()
            node._backprop = None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def backprop(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backprop)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data - b.data

    def backprop(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _node(out_data, (a, b), backprop)


def neg(a):
    def backprop(g):
        a._accumulate(-g)

    return _node(-a.data, (a,), backprop)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data

    def backprop(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backprop)


def matmul(a, b):
    """Matrix product with numpy @ semantics over stacked batch dims.

    Both operands must have ndim >= 2; leading dims broadcast and the
    gradient is summed back over broadcast dims.
    """
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dims; reshape first")
    out_data = a.data @ b.data

    def backprop(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _node(out_data, (a, b), backprop)


def pow_scalar(a, p):
    p = float(p)
    out_data = a.data**p

    def backprop(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _node(out_data, (a,), backprop)


def exp(a):
    out_data = np.exp(a.data)

    def backprop(g):
        a._accumulate(g * out_data)

    return _node(out_data, (a,), backprop)


def log(a):
    out_data = np.log(a.data)

    def backprop(g):
        a._accumulate(g / a.data)

    return _node(out_data, (a,), backprop)


def relu(a):
    out_data = np.maximum(a.data, 0.0)

    def backprop(g):
        a._accumulate(g * (a.data > 0.0))

    return _node(out_data, (a,), backprop)


def tensor_sum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backprop(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape))

    return _node(out_data, (a,), backprop)


def tensor_mean(a, axis=None, keepdims=False):
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    denom = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])

    def backprop(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape) / denom)

    return _node(out_data, (a,), backprop)


def reshape(a, shape):
    in_shape = a.data.shape
    out_data = a.data.reshape(shape)

    def backprop(g):
        a._accumulate(g.reshape(in_shape))

    return _node(out_data, (a,), backprop)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.transpose(a.data, axes)

    def backprop(g):
        a._accumulate(np.transpose(g, inv))

    return _node(out_data, (a,), backprop)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backprop(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return _node(out_data, tuple(tensors), backprop)


def gather_rows(a, idx):
    """Row lookup a[idx] for integer idx of any shape (embedding lookup).

    Output shape is idx.shape + a.shape[1:]; backward scatter-adds.
    """
    idx = np.asarray(idx)
    out_data = a.data[idx]

    def backprop(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx.ravel(), g.reshape(-1, *a.data.shape[1:]))
        a._accumulate(ga)

    return _node(out_data, (a,), backprop)


def gather_last(a, idx):
    """out[..., i, j] = a[..., i, idx[i, j]] for idx of shape a.shape[-2:].

    Used to remap distance-indexed attention scores onto key positions.
    """
    idx = np.asarray(idx)
    if idx.shape != a.data.shape[-2:]:
        raise ValueError(f"index shape {idx.shape} must match trailing dims {a.data.shape[-2:]}")
    idx_b = np.broadcast_to(idx, a.data.shape)
    out_data = np.take_along_axis(a.data, idx_b, axis=-1)

    n, last = a.data.shape[-2], a.data.shape[-1]
    lead = int(np.prod(a.data.shape[:-2], dtype=np.int64))

    def backprop(g):
        offsets = (np.arange(lead, dtype=np.int64) * (n * last)).reshape(-1, 1, 1)
        rows = (np.arange(n, dtype=np.int64) * last).reshape(1, -1, 1)
        flat_idx = np.broadcast_to(offsets + rows + idx.reshape(1, n, last), g.shape).ravel()
        ga = np.bincount(flat_idx, weights=g.ravel(), minlength=a.data.size)
        a._accumulate(ga.reshape(a.data.shape))

    return _node(out_data, (a,), backprop)


def select_last(a, idx):
    """out[...] = a[..., idx[...]] where idx matches a's leading dims.

    Picks one entry along the last axis per position, e.g. the target-token
    log-probability out of a vocabulary axis.
    """
    idx = np.asarray(idx)
    if idx.shape != a.data.shape[:-1]:
        raise ValueError(f"index shape {idx.shape} must match leading dims {a.data.shape[:-1]}")
    out_data = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    last = a.data.shape[-1]

    def backprop(g):
        ga = np.zeros(a.data.size, dtype=np.float64)
        base = np.arange(idx.size, dtype=np.int64) * last
        np.add.at(ga, base + idx.ravel(), g.ravel())
        a._accumulate(ga.reshape(a.data.shape))

    return _node(out_data, (a,), backprop)


def _check_finite(x, op):
    if not np.isfinite(x).all():
        raise FloatingPointError(f"{op} received non-finite input (corrupted activations)")


def softmax(a, axis=-1):
    """Numerically stabilized softmax; raises on non-finite input."""
    _check_finite(a.data, "softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backprop(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return _node(out_data, (a,), backprop)


def log_softmax(a, axis=-1):
    _check_finite(a.data, "log_softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backprop(g):
        p = np.exp(out_data)
        a._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return _node(out_data, (a,), backprop)


def _sigmoid_array(x):
    # piecewise form avoids overflow on large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a):
    out_data = _sigmoid_array(np.atleast_1d(a.data)).reshape(a.data.shape)

    def backprop(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), backprop)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gamma.data + beta.data

    d = x.data.shape[-1]

    def backprop(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gx - m1 - xhat * m2))

    return _node(out_data, (x, gamma, beta), backprop)


def dropout(x, rate, rng, training):
    """Inverted-scaling dropout; identity when not training or rate is 0."""
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))
