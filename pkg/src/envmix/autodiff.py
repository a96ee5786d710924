"""Reverse-mode differentiation on a flat tape of numpy float64 operations.

Every trainable objective in the package is a composition of the primitives
defined here (add/mul/matmul/affine/relu/logistic/softplus/exp/log/square/
sum/mean/logsumexp and a few shape helpers). Objectives are written as plain
functions of their inputs; passing :class:`Node` arguments records the
computation on a :class:`Tape`, passing numpy arrays evaluates the same code
without recording. :func:`forward_backward` runs one forward pass and one
reverse sweep and returns the scalar value together with the exact gradient
(up to float rounding) packed as a :class:`ParamVector`.

Tapes are single-owner and never shared between threads. Parameter vectors
are immutable snapshots; Adam state has a single writer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tape",
    "Node",
    "ParamVector",
    "NonFiniteError",
    "forward_backward",
    "value_only",
    "AdamState",
    "adam_step",
]


class NonFiniteError(ArithmeticError):
    """A primitive produced a NaN or infinity during the forward pass."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum-reduce ``grad`` over the axes numpy broadcast to reach its shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Append-only record of primitive operations in topological order."""

    def __init__(self):
        self._ops = []        # (name, parent indices, backward fn)
        self._values = []     # per-node forward value
        self.check_finite = True

    def __len__(self):
        return len(self._ops)

    def leaf(self, value, name="leaf") -> "Node":
        return self._record(name, _as_array(value), (), None)

    def _record(self, name, value, parents, backward) -> "Node":
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(
                f"non-finite value produced by '{name}' at tape node {len(self._ops)}"
            )
        self._ops.append((name, parents, backward))
        self._values.append(value)
        return Node(self, len(self._ops) - 1)

    def backward(self, root: "Node") -> list:
        """Reverse sweep from a scalar root; returns per-node adjoints."""
        if root.tape is not self:
            raise ValueError("root node belongs to a different tape")
        if self._values[root.index].size != 1:
            raise ValueError("backward pass requires a scalar root")
        adjoints = [None] * len(self._ops)
        adjoints[root.index] = np.ones_like(self._values[root.index])
        for i in range(root.index, -1, -1):
            g = adjoints[i]
            if g is None:
                continue
            _, parents, backward = self._ops[i]
            if backward is None:
                continue
            for parent, contribution in zip(parents, backward(g)):
                if adjoints[parent] is None:
                    adjoints[parent] = np.array(contribution, dtype=np.float64)
                else:
                    adjoints[parent] = adjoints[parent] + contribution
        return adjoints


class Node:
    """Handle to one tape entry; supports numpy-style arithmetic."""

    __slots__ = ("tape", "index")

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.index]

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(index={self.index}, shape={self.value.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)


def _binary(name, a, b, forward, backward_a, backward_b):
    """Record a broadcasting binary op; either side may be a constant."""
    node_a, node_b = isinstance(a, Node), isinstance(b, Node)
    tape = a.tape if node_a else b.tape
    va = a.value if node_a else _as_array(a)
    vb = b.value if node_b else _as_array(b)
    with np.errstate(all="ignore"):
        out = forward(va, vb)
    parents, grads = [], []
    if node_a:
        parents.append(a.index)
        grads.append(lambda g: _unbroadcast(backward_a(g, va, vb), va.shape))
    if node_b:
        parents.append(b.index)
        grads.append(lambda g: _unbroadcast(backward_b(g, va, vb), vb.shape))

    def backward(g):
        return [fn(g) for fn in grads]

    return tape._record(name, out, tuple(parents), backward)


def _unary(name, x, forward, backward):
    tape = x.tape
    vx = x.value
    with np.errstate(all="ignore"):
        out = forward(vx)
    return tape._record(
        name, out, (x.index,), lambda g: (backward(g, vx, out),)
    )


def add(a, b):
    if not (isinstance(a, Node) or isinstance(b, Node)):
        return np.add(a, b)
    return _binary("add", a, b, np.add, lambda g, va, vb: g, lambda g, va, vb: g)


def sub(a, b):
    if not (isinstance(a, Node) or isinstance(b, Node)):
        return np.subtract(a, b)
    return _binary("sub", a, b, np.subtract, lambda g, va, vb: g, lambda g, va, vb: -g)


def mul(a, b):
    if not (isinstance(a, Node) or isinstance(b, Node)):
        return np.multiply(a, b)
    return _binary(
        "mul", a, b, np.multiply, lambda g, va, vb: g * vb, lambda g, va, vb: g * va
    )


def div(a, b):
    if not (isinstance(a, Node) or isinstance(b, Node)):
        return np.divide(a, b)
    return _binary(
        "div",
        a,
        b,
        np.divide,
        lambda g, va, vb: g / vb,
        lambda g, va, vb: -g * va / (vb * vb),
    )


def neg(x):
    if not isinstance(x, Node):
        return np.negative(x)
    return _unary("neg", x, np.negative, lambda g, vx, out: -g)


def matmul(a, b):
    """Matrix product for the (2d,2d), (2d,1d), (1d,2d) and (1d,1d) cases."""
    if not (isinstance(a, Node) or isinstance(b, Node)):
        return np.matmul(a, b)

    def back_a(g, va, vb):
        if vb.ndim == 1 and va.ndim == 1:
            return g * vb
        if vb.ndim == 1:  # (n,d) @ (d,) -> (n,)
            return np.outer(g, vb)
        if va.ndim == 1:  # (d,) @ (d,m) -> (m,)
            return g @ vb.T
        return g @ vb.T

    def back_b(g, va, vb):
        if va.ndim == 1 and vb.ndim == 1:
            return g * va
        if vb.ndim == 1:
            return va.T @ g
        if va.ndim == 1:
            return np.outer(va, g)
        return va.T @ g

    return _binary("matmul", a, b, np.matmul, back_a, back_b)


def affine(x, w, b):
    """Fused ``x @ w + b`` for a 2-d batch ``x`` and bias row ``b``."""
    if not any(isinstance(v, Node) for v in (x, w, b)):
        return np.matmul(x, w) + b
    return add(matmul(x, w), b)


def relu(x):
    if not isinstance(x, Node):
        return np.maximum(x, 0.0)
    return _unary(
        "relu",
        x,
        lambda v: np.maximum(v, 0.0),
        lambda g, vx, out: g * (vx > 0.0),
    )


def logistic(x):
    """Numerically stable sigmoid 1 / (1 + exp(-x))."""
    if not isinstance(x, Node):
        return _sigmoid(x)
    return _unary("logistic", x, _sigmoid, lambda g, vx, out: g * out * (1.0 - out))


def _sigmoid(v):
    v = _as_array(v)
    out = np.empty_like(v, dtype=np.float64)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def softplus(x):
    """log(1 + exp(x)) evaluated without overflow."""
    if not isinstance(x, Node):
        return np.logaddexp(0.0, x)
    return _unary(
        "softplus",
        x,
        lambda v: np.logaddexp(0.0, v),
        lambda g, vx, out: g * _sigmoid(vx),
    )


def exp(x):
    if not isinstance(x, Node):
        return np.exp(x)
    return _unary("exp", x, np.exp, lambda g, vx, out: g * out)


def log(x):
    if not isinstance(x, Node):
        return np.log(x)
    return _unary("log", x, np.log, lambda g, vx, out: g / vx)


def square(x):
    if not isinstance(x, Node):
        return np.square(x)
    return _unary("square", x, np.square, lambda g, vx, out: g * 2.0 * vx)


def sum(x, axis=None):  # noqa: A001 - numpy-style namespace
    if not isinstance(x, Node):
        return np.sum(x, axis=axis)

    def backward(g, vx, out):
        if axis is None:
            return np.broadcast_to(g, vx.shape)
        return np.broadcast_to(np.expand_dims(g, axis), vx.shape)

    return _unary("sum", x, lambda v: np.sum(v, axis=axis), backward)


def mean(x, axis=None):
    if not isinstance(x, Node):
        return np.mean(x, axis=axis)
    count = x.value.size if axis is None else x.value.shape[axis]
    return div(sum(x, axis=axis), float(count))


def logsumexp(x, axis=None):
    """log(sum(exp(x))) with max-centering; gradient is the softmax."""
    if not isinstance(x, Node):
        return _logsumexp_array(x, axis)

    def backward(g, vx, out):
        if axis is None:
            return g * np.exp(vx - out)
        return np.expand_dims(g, axis) * np.exp(vx - np.expand_dims(out, axis))

    return _unary("logsumexp", x, lambda v: _logsumexp_array(v, axis), backward)


def _logsumexp_array(v, axis=None):
    v = _as_array(v)
    m = np.max(v, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(v - m), axis=axis)) + np.squeeze(m, axis=axis if axis is not None else None)
    return out


def expand_dims(x, axis):
    if not isinstance(x, Node):
        return np.expand_dims(x, axis)
    return _unary(
        "expand_dims",
        x,
        lambda v: np.expand_dims(v, axis),
        lambda g, vx, out: g.reshape(vx.shape),
    )


def reshape(x, shape):
    if not isinstance(x, Node):
        return np.reshape(x, shape)
    return _unary(
        "reshape",
        x,
        lambda v: np.reshape(v, shape),
        lambda g, vx, out: g.reshape(vx.shape),
    )


def stack(nodes):
    """Stack scalar nodes into a vector node (all on one tape)."""
    if not any(isinstance(n, Node) for n in nodes):
        return np.stack([_as_array(n) for n in nodes])
    tape = next(n.tape for n in nodes if isinstance(n, Node))
    values = [n.value if isinstance(n, Node) else _as_array(n) for n in nodes]
    out = np.stack(values)
    parents = tuple(n.index for n in nodes if isinstance(n, Node))
    node_slots = [i for i, n in enumerate(nodes) if isinstance(n, Node)]

    def backward(g):
        return [g[i] for i in node_slots]

    return tape._record("stack", out, parents, backward)


def slice_rows(x, start, stop):
    """Contiguous row slice ``x[start:stop]``."""
    if not isinstance(x, Node):
        return x[start:stop]

    def backward(g, vx, out):
        full = np.zeros_like(vx)
        full[start:stop] = g
        return full

    return _unary("slice_rows", x, lambda v: v[start:stop], backward)


# ---------------------------------------------------------------------------
# Parameter packing


class ParamVector:
    """Immutable flat float64 parameter storage with named segments.

    The layout maps each name to ``(offset, shape)``; segments are disjoint
    and cover the flat array exactly, so pack/unpack round-trips are the
    identity.
    """

    def __init__(self, values: np.ndarray, layout: dict):
        values = _as_array(values).ravel()
        covered = 0
        for name, (offset, shape) in layout.items():
            size = int(np.prod(shape, dtype=int))
            if offset != covered:
                raise ValueError(f"segment '{name}' is not contiguous at offset {offset}")
            covered += size
        if covered != values.size:
            raise ValueError(
                f"layout covers {covered} values but the array holds {values.size}"
            )
        self._values = values.copy()
        self._values.flags.writeable = False
        self._layout = dict(layout)

    @classmethod
    def from_arrays(cls, arrays: dict) -> "ParamVector":
        layout, flats, offset = {}, [], 0
        for name, arr in arrays.items():
            arr = _as_array(arr)
            layout[name] = (offset, arr.shape)
            flats.append(arr.ravel())
            offset += arr.size
        values = np.concatenate(flats) if flats else np.empty(0)
        return cls(values, layout)

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def layout(self) -> dict:
        return dict(self._layout)

    def __len__(self):
        return self._values.size

    def names(self):
        return list(self._layout)

    def get(self, name) -> np.ndarray:
        offset, shape = self._layout[name]
        size = int(np.prod(shape, dtype=int))
        return self._values[offset : offset + size].reshape(shape)

    def unpack(self) -> dict:
        return {name: self.get(name) for name in self._layout}

    def with_values(self, values) -> "ParamVector":
        values = _as_array(values).ravel()
        if values.size != self._values.size:
            raise ValueError("replacement values have the wrong length")
        return ParamVector(values, self._layout)

    def replace(self, name, array) -> "ParamVector":
        offset, shape = self._layout[name]
        array = _as_array(array)
        if array.shape != tuple(shape):
            raise ValueError(f"segment '{name}' expects shape {shape}, got {array.shape}")
        values = self._values.copy()
        values[offset : offset + array.size] = array.ravel()
        return ParamVector(values, self._layout)


def forward_backward(objective, params: ParamVector):
    """Evaluate ``objective`` at ``params`` and return (value, gradient).

    ``objective`` receives a dict mapping segment names to tape nodes and
    must return a scalar node. The gradient comes back as a ParamVector
    with the same layout.
    """
    tape = Tape()
    leaves = {name: tape.leaf(params.get(name), name=name) for name in params.names()}
    root = objective(leaves)
    if not isinstance(root, Node):
        raise TypeError("objective must return a tape node")
    adjoints = tape.backward(root)
    grads = {}
    for name, leaf in leaves.items():
        adj = adjoints[leaf.index]
        grads[name] = np.zeros(params.get(name).shape) if adj is None else adj
    return float(root.value), ParamVector.from_arrays(grads)


def value_only(objective, params: ParamVector) -> float:
    """Evaluate ``objective`` on plain arrays, without recording a tape."""
    out = objective(params.unpack())
    return float(out)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment accumulators and the step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, params: ParamVector) -> "AdamState":
        return cls(m=np.zeros(len(params)), v=np.zeros(len(params)), t=0)


def adam_step(
    params: ParamVector,
    grad: ParamVector,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One bias-corrected Adam update; returns (new params, new state)."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    g = grad.values
    if g.size != len(params) or state.m.size != len(params):
        raise ValueError("gradient/state dimensions do not match the parameters")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_values = params.values - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params.with_values(new_values), AdamState(m=m, v=v, t=t)
