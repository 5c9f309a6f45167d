"""Dense float64 arrays with reverse-mode differentiation.

This is a deliberately small compute layer: it covers exactly the
operations the QA model graph needs (broadcasted matmul, elementwise
arithmetic, gelu/sigmoid, softmax, layer normalization, embedding
lookup, concat/stack/slice/reshape/transpose, reductions, softmax
cross-entropy) plus an Adam optimizer.

The graph is dynamic: every forward call builds fresh ``Node`` objects;
``Parameter`` leaves persist across steps. ``backward`` walks the graph
once in reverse topological order and accumulates into ``.grad``.

Every forward result is checked for NaN/Inf; a non-finite value raises
``NonFiniteError`` instead of propagating silently. Everything is
float64: the gradient checks this library is validated against need the
headroom.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(ArithmeticError):
    """A forward operation produced NaN or Inf."""


def _finite(value: np.ndarray, op: str) -> np.ndarray:
    # cheap screen first: any NaN/Inf element makes the sum non-finite;
    # a non-finite sum of finite elements (magnitude overflow) is ruled
    # out by the exact check before raising
    if not np.isfinite(value.sum()):
        if not np.isfinite(value).all():
            raise NonFiniteError(f"{op} produced a non-finite value")
    return value


class Node:
    """One vertex of the computation graph.

    ``value`` is a float64 ndarray, ``grad`` is lazily allocated during
    backward and has the same shape as ``value``.
    """

    __slots__ = ("value", "grad", "parents", "requires_grad", "_backward")

    def __init__(self, value, parents=(), backward=None, requires_grad=False):
        if type(value) is not np.ndarray or value.dtype != np.float64:
            value = np.asarray(value, dtype=np.float64)
        self.value = value
        self.grad = None
        self.parents = parents
        self.requires_grad = requires_grad
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_node(self, key)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """A named, trainable graph leaf.

    Names are hierarchical (``"v_bert.layer0.attn.wq"``); a model keeps
    them unique. The optimizer mutates ``value`` in place between
    graphs; nothing else may.
    """

    __slots__ = ("name", "node")

    def __init__(self, name: str, value):
        self.name = name
        self.node = Node(value, requires_grad=True)

    @property
    def value(self) -> np.ndarray:
        return self.node.value

    @value.setter
    def value(self, new):
        self.node.value = np.asarray(new, dtype=np.float64)

    @property
    def grad(self):
        return self.node.grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.node.value.shape})"


def constant(value) -> Node:
    """Wrap a plain array or scalar as a non-trainable graph leaf."""
    return Node(value)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _accumulate(node: Node, grad: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += grad


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    value = _finite(a.value + b.value, "add")
    rg = a.requires_grad or b.requires_grad

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.value.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.value.shape))

    return Node(value, (a, b), backward, rg)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    value = _finite(a.value - b.value, "sub")
    rg = a.requires_grad or b.requires_grad

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.value.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.value.shape))

    return Node(value, (a, b), backward, rg)


def mul(a, b) -> Node:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = as_node(a), as_node(b)
    try:
        value = a.value * b.value
    except ValueError:
        raise DimensionError(
            f"mul: shapes not broadcastable: {a.value.shape} * {b.value.shape}"
        ) from None
    _finite(value, "mul")
    rg = a.requires_grad or b.requires_grad

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.value, b.value.shape))

    return Node(value, (a, b), backward, rg)


def matmul(a, b) -> Node:
    """Matrix product; stacked dimensions broadcast as in numpy."""
    a, b = as_node(a), as_node(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise DimensionError(
            f"matmul needs >=2-d operands, got {a.value.shape} @ {b.value.shape}"
        )
    if a.value.shape[-1] != b.value.shape[-2]:
        raise DimensionError(
            f"matmul: inner dimensions differ: {a.value.shape} @ {b.value.shape}"
        )
    value = _finite(a.value @ b.value, "matmul")
    rg = a.requires_grad or b.requires_grad

    def backward(g):
        if a.requires_grad:
            ga = g @ b.value.swapaxes(-1, -2)
            _accumulate(a, _unbroadcast(ga, a.value.shape))
        if b.requires_grad:
            gb = a.value.swapaxes(-1, -2) @ g
            _accumulate(b, _unbroadcast(gb, b.value.shape))

    return Node(value, (a, b), backward, rg)


def linear(x: Node, w: Node, b: Node) -> Node:
    """Fused affine map x @ w + b; one graph node instead of two."""
    x, w, b = as_node(x), as_node(w), as_node(b)
    if x.value.shape[-1] != w.value.shape[-2]:
        raise DimensionError(
            f"linear: inner dimensions differ: {x.value.shape} @ {w.value.shape}"
        )
    value = _finite(x.value @ w.value + b.value, "linear")
    rg = x.requires_grad or w.requires_grad or b.requires_grad

    def backward(g):
        if x.requires_grad:
            _accumulate(x, _unbroadcast(g @ w.value.swapaxes(-1, -2), x.value.shape))
        if w.requires_grad:
            _accumulate(w, _unbroadcast(x.value.swapaxes(-1, -2) @ g, w.value.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.value.shape))

    return Node(value, (x, w, b), backward, rg)


def gelu(x: Node) -> Node:
    """Exact (erf-based) gaussian error linear unit."""
    x = as_node(x)
    cdf = 0.5 * (1.0 + erf(x.value * _INV_SQRT2))
    value = _finite(x.value * cdf, "gelu")

    def backward(g):
        if x.requires_grad:
            pdf = np.exp(-0.5 * x.value * x.value) * _INV_SQRT2PI
            _accumulate(x, g * (cdf + x.value * pdf))

    return Node(value, (x,), backward, x.requires_grad)


def sigmoid(x: Node) -> Node:
    x = as_node(x)
    s = expit(x.value)  # bounded in (0, 1): finite by construction

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * s * (1.0 - s))

    return Node(s, (x,), backward, x.requires_grad)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Node, shape) -> Node:
    # pure data movement: cannot create non-finite values, so no check
    x = as_node(x)
    old = x.value.shape
    value = x.value.reshape(shape)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g.reshape(old))

    return Node(value, (x,), backward, x.requires_grad)


_INVERSE_PERM: dict[tuple, tuple] = {}


def transpose(x: Node, axes) -> Node:
    x = as_node(x)
    axes = tuple(axes)
    inverse = _INVERSE_PERM.get(axes)
    if inverse is None:
        inverse = _INVERSE_PERM[axes] = tuple(int(i) for i in np.argsort(axes))
    value = x.value.transpose(axes)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g.transpose(inverse))

    return Node(value, (x,), backward, x.requires_grad)


def split_heads(x: Node, n_heads: int) -> Node:
    """[B, n, d] -> [B, H, n, d/H] in one node."""
    b, n, d = x.value.shape
    dh = d // n_heads
    value = x.value.reshape(b, n, n_heads, dh).transpose(0, 2, 1, 3)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g.transpose(0, 2, 1, 3).reshape(b, n, d))

    return Node(value, (x,), backward, x.requires_grad)


def merge_heads(x: Node) -> Node:
    """[B, H, n, d/H] -> [B, n, d] in one node."""
    b, h, n, dh = x.value.shape
    value = x.value.transpose(0, 2, 1, 3).reshape(b, n, h * dh)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g.reshape(b, n, h, dh).transpose(0, 2, 1, 3))

    return Node(value, (x,), backward, x.requires_grad)


def broadcast_to(x: Node, shape) -> Node:
    x = as_node(x)
    value = np.broadcast_to(x.value, shape)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, _unbroadcast(g, x.value.shape))

    return Node(value, (x,), backward, x.requires_grad)


def slice_node(x: Node, key) -> Node:
    """Basic (non-fancy) indexing; dropped axes behave like numpy."""
    x = as_node(x)
    value = x.value[key]

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.value)
            full[key] = g
            _accumulate(x, full)

    return Node(value, (x,), backward, x.requires_grad)


def concat(nodes, axis: int) -> Node:
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise DimensionError("concat of an empty sequence")
    value = np.concatenate([n.value for n in nodes], axis=axis)
    rg = any(n.requires_grad for n in nodes)
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, offsets, axis=axis)
        for n, piece in zip(nodes, pieces):
            if n.requires_grad:
                _accumulate(n, piece)

    return Node(value, tuple(nodes), backward, rg)


def stack(nodes, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    value = np.stack([n.value for n in nodes], axis=axis)
    rg = any(n.requires_grad for n in nodes)

    def backward(g):
        for i, n in enumerate(nodes):
            if n.requires_grad:
                _accumulate(n, np.take(g, i, axis=axis))

    return Node(value, tuple(nodes), backward, rg)


# ---------------------------------------------------------------------------
# reductions


def _axis_count(shape, axis):
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    if isinstance(axis, int):
        axis = (axis,)
    return int(np.prod([shape[a] for a in axis]))


def sum_node(x: Node, axis=None, keepdims: bool = False) -> Node:
    x = as_node(x)
    value = x.value.sum(axis=axis, keepdims=keepdims)
    _finite(np.asarray(value), "sum")

    def backward(g):
        if x.requires_grad:
            gg = g
            if not keepdims and axis is not None:
                gg = np.expand_dims(gg, axis)
            _accumulate(x, np.broadcast_to(gg, x.value.shape).copy())

    return Node(value, (x,), backward, x.requires_grad)


def mean(x: Node, axis=None, keepdims: bool = False) -> Node:
    x = as_node(x)
    value = x.value.mean(axis=axis, keepdims=keepdims)
    _finite(np.asarray(value), "mean")
    count = _axis_count(x.value.shape, axis)

    def backward(g):
        if x.requires_grad:
            gg = g
            if not keepdims and axis is not None:
                gg = np.expand_dims(gg, axis)
            _accumulate(x, np.broadcast_to(gg, x.value.shape) / count)

    return Node(value, (x,), backward, x.requires_grad)


# ---------------------------------------------------------------------------
# fused neural-net primitives


def softmax(x: Node) -> Node:
    """Softmax over the last axis, computed with max subtraction.

    With the max subtracted every exponential is at most 1 and the
    denominator at least 1, so finite input cannot overflow.
    """
    x = as_node(x)
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            inner = (g * s).sum(axis=-1, keepdims=True)
            _accumulate(x, s * (g - inner))

    return Node(s, (x,), backward, x.requires_grad)


def layernorm(x: Node, gain: Node, bias: Node, eps: float = 1e-12) -> Node:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_node(x), as_node(gain), as_node(bias)
    d = x.value.shape[-1]
    if gain.value.shape != (d,) or bias.value.shape != (d,):
        raise DimensionError(
            f"layernorm: gain/bias must be ({d},), "
            f"got {gain.value.shape} and {bias.value.shape}"
        )
    inv_d = 1.0 / d
    mu = x.value.sum(axis=-1, keepdims=True) * inv_d
    xc = x.value - mu
    var = (xc * xc).sum(axis=-1, keepdims=True) * inv_d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    value = _finite(gain.value * xhat + bias.value, "layernorm")

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=lead))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gain.value
            term = dxhat - dxhat.sum(axis=-1, keepdims=True) * inv_d
            term -= xhat * ((dxhat * xhat).sum(axis=-1, keepdims=True) * inv_d)
            _accumulate(x, inv * term)

    return Node(value, (x, gain, bias), backward, x.requires_grad or gain.requires_grad or bias.requires_grad)


def embedding_lookup(table: Node, indices) -> Node:
    """Row gather from ``table`` ([V, d]) by an integer index array."""
    table = as_node(table)
    indices = np.asarray(indices)
    if indices.min(initial=0) < 0 or indices.max(initial=0) >= table.value.shape[0]:
        raise IndexError(
            f"embedding index out of range for table of {table.value.shape[0]} rows"
        )
    value = table.value[indices]

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.value)
            np.add.at(full, indices, g)
            _accumulate(table, full)

    return Node(value, (table,), backward, table.requires_grad)


def embedding_sum(tables: list[Node], index_arrays: list[np.ndarray]) -> Node:
    """Sum of several row gathers (token + segment + position tables)."""
    value = tables[0].value[index_arrays[0]]
    for table, ids in zip(tables[1:], index_arrays[1:]):
        value = value + table.value[ids]

    def backward(g):
        for table, ids in zip(tables, index_arrays):
            if table.requires_grad:
                full = np.zeros_like(table.value)
                np.add.at(full, ids, g)
                _accumulate(table, full)

    rg = any(t.requires_grad for t in tables)
    return Node(value, tuple(tables), backward, rg)


def cross_entropy(logits: Node, labels) -> Node:
    """Mean softmax cross-entropy of ``logits`` ([B, C]) against index labels."""
    logits = as_node(logits)
    if logits.value.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, C] logits, got {logits.value.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.value.shape
    if labels.shape != (b,):
        raise DimensionError(f"cross_entropy: labels shape {labels.shape} != ({b},)")
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"label out of range [0, {c}): {labels.tolist()}")
    shifted = logits.value - logits.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    logp = shifted[np.arange(b), labels] - lse
    value = _finite(np.asarray(-logp.mean()), "cross_entropy")

    def backward(g):
        if logits.requires_grad:
            probs = np.exp(shifted - lse[:, None])
            probs[np.arange(b), labels] -= 1.0
            _accumulate(logits, g * probs / b)

    return Node(value, (logits,), backward, logits.requires_grad)


# ---------------------------------------------------------------------------
# backward pass


def backward(node: Node) -> None:
    """Reverse-mode sweep from a scalar ``node``.

    Each reachable node is visited exactly once, in reverse topological
    order; gradients accumulate, so a leaf feeding the graph twice
    receives the sum of both paths.
    """
    if node.value.size != 1:
        raise DimensionError(f"backward requires a scalar output, got shape {node.value.shape}")
    order = []
    seen = set()
    stack_ = [(node, False)]
    while stack_:
        current, expanded = stack_.pop()
        if expanded:
            order.append(current)
            continue
        if id(current) in seen:
            continue
        seen.add(id(current))
        stack_.append((current, True))
        for parent in current.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    node.grad = np.ones_like(node.value)
    for current in reversed(order):
        if current._backward is not None:
            current._backward(current.grad)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction and decoupled weight decay.

    Decay is applied directly to the weights (not folded into the
    gradient), so it acts even on parameters whose gradient is zero.
    ``step`` consumes and zeroes the gradients.
    """

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if isinstance(params, dict):
            params = params.values()
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in optimizer")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {p.name: np.zeros_like(p.value) for p in self.params}
        self._v = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        correct1 = 1.0 - b1 ** self.t
        correct2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.node.grad
            if g is None:
                g = np.zeros_like(p.value)
            m = self._m[p.name]
            v = self._v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / correct1
            vhat = v / correct2
            update = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.value
            p.node.value = p.value - self.lr * update
            p.node.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.node.grad = None
