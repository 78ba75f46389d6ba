"""Small reverse-mode autodiff engine for dense networks.

Values are float64 numpy arrays (scalars, vectors or matrices). A graph is
recorded while the forward computation runs and discarded after
:func:`backward`; nothing persists between batches except the
:class:`ParamStore`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TapeError(RuntimeError):
    """Raised when backward is requested on something that was not recorded."""


class ParamStore:
    """Flat float64 parameter vector with a matching gradient vector.

    Named segments are contiguous, disjoint and cover the store. ``view`` and
    ``grad_view`` return reshaped views, so in-place optimiser updates on the
    flat arrays are visible through them.
    """

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        arrays = arrays or {}
        self.layout: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        offset = 0
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            self.layout[name] = (offset, offset + arr.size, arr.shape)
            offset += arr.size
        self.values = np.zeros(offset)
        self.grads = np.zeros(offset)
        for name, arr in arrays.items():
            lo, hi, _ = self.layout[name]
            self.values[lo:hi] = np.ravel(arr)

    def __len__(self) -> int:
        return self.values.size

    def __contains__(self, name: str) -> bool:
        return name in self.layout

    def names(self) -> list[str]:
        return list(self.layout)

    def view(self, name: str) -> np.ndarray:
        lo, hi, shape = self.layout[name]
        return self.values[lo:hi].reshape(shape)

    def grad_view(self, name: str) -> np.ndarray:
        lo, hi, shape = self.layout[name]
        return self.grads[lo:hi].reshape(shape)

    def zero_grad(self) -> None:
        self.grads[:] = 0.0

    def copy(self) -> "ParamStore":
        out = ParamStore()
        out.layout = dict(self.layout)
        out.values = self.values.copy()
        out.grads = self.grads.copy()
        return out


class Node:
    """A recorded value. ``parents`` pairs each input node with a vjp closure."""

    __slots__ = ("value", "parents", "grad", "store", "name")
    __array_ufunc__ = None  # make numpy defer to the operators below

    def __init__(self, value, parents=(), store: ParamStore | None = None, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.grad = None
        self.store = store
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def tracked(self) -> bool:
        return bool(self.parents) or self.store is not None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_node(other)))

    def __rsub__(self, other):
        return add(as_node(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, tracked={self.tracked})"


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def param(store: ParamStore, name: str) -> Node:
    """Leaf node bound to a store segment; backward accumulates into its grad slot."""
    return Node(store.view(name), store=store, name=name)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _unary(x: Node, value, vjp) -> Node:
    return Node(value, ((x, vjp),) if x.tracked else ())


def _binary(a: Node, b: Node, value, vjp_a, vjp_b) -> Node:
    parents = []
    if a.tracked:
        parents.append((a, vjp_a))
    if b.tracked:
        parents.append((b, vjp_b))
    return Node(value, tuple(parents))


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _binary(
        a, b, a.value + b.value,
        lambda g: _unbroadcast(g, a.shape),
        lambda g: _unbroadcast(g, b.shape),
    )


def neg(a: Node) -> Node:
    return _unary(a, -a.value, lambda g: -g)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    return _binary(
        a, b, av * bv,
        lambda g: _unbroadcast(g * bv, a.shape),
        lambda g: _unbroadcast(g * av, b.shape),
    )


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim not in (1, 2) or av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul shape mismatch {av.shape} @ {bv.shape}")
    if bv.ndim == 1:
        return _binary(a, b, av @ bv, lambda g: np.outer(g, bv), lambda g: av.T @ g)
    return _binary(a, b, av @ bv, lambda g: g @ bv.T, lambda g: av.T @ g)


def square(a: Node) -> Node:
    v = a.value
    return _unary(a, v * v, lambda g: 2.0 * g * v)


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return _unary(a, out, lambda g: g * out)


def log(a: Node) -> Node:
    v = a.value
    return _unary(a, np.log(v), lambda g: g / v)


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return _unary(a, out, lambda g: g * (1.0 - out * out))


def sigmoid(a: Node) -> Node:
    out = sigmoid_np(a.value)
    return _unary(a, out, lambda g: g * out * (1.0 - out))


def softplus(a: Node) -> Node:
    v = a.value
    return _unary(a, np.logaddexp(0.0, v), lambda g: g * sigmoid_np(v))


def leaky_relu(a: Node, slope: float = 0.2) -> Node:
    v = a.value
    d = np.where(v > 0, 1.0, slope)
    return _unary(a, v * d, lambda g: g * d)


def lower_bound(a: Node, floor: float) -> Node:
    """max(a, floor); the gradient passes where a > floor or where it would raise a."""
    v = a.value
    return _unary(a, np.maximum(v, floor), lambda g: g * ((v > floor) | (g < 0)))


def log_softmax(a: Node) -> Node:
    """Row-wise log-softmax (last axis)."""
    out = log_softmax_np(a.value)
    p = np.exp(out)
    return _unary(a, out, lambda g: g - p * g.sum(axis=-1, keepdims=True))


def take(a: Node, index) -> Node:
    """Per-row element pick: ``out[i] = a[i, index[i]]`` (or ``a[index]`` for a vector)."""
    v = a.value
    index = np.asarray(index)
    if v.ndim == 1:
        def vjp(g):
            out = np.zeros_like(v)
            np.add.at(out, index, g)
            return out
        return _unary(a, v[index], vjp)
    rows = np.arange(v.shape[0])

    def vjp(g):
        out = np.zeros_like(v)
        out[rows, index] = g
        return out
    return _unary(a, v[rows, index], vjp)


def gather_rows(a: Node, index) -> Node:
    """``out = a[index]`` on the leading axis (embedding lookup)."""
    v = a.value
    index = np.asarray(index)

    def vjp(g):
        out = np.zeros_like(v)
        np.add.at(out, index, g)
        return out
    return _unary(a, v[index], vjp)


def concat_cols(parts) -> Node:
    """Concatenate 2-D nodes along columns."""
    parts = [as_node(p) for p in parts]
    widths = [p.shape[1] for p in parts]
    edges = np.cumsum([0] + widths)
    value = np.concatenate([p.value for p in parts], axis=1)
    parents = tuple(
        (p, (lambda g, lo=lo, hi=hi: g[:, lo:hi]))
        for p, lo, hi in zip(parts, edges[:-1], edges[1:])
        if p.tracked
    )
    return Node(value, parents)


def reshape(a: Node, shape) -> Node:
    old = a.shape
    return _unary(a, a.value.reshape(shape), lambda g: g.reshape(old))


def total(a: Node) -> Node:
    shape = a.shape
    return _unary(a, a.value.sum(), lambda g: np.broadcast_to(g, shape).copy())


def mean(a: Node) -> Node:
    shape, n = a.shape, a.value.size
    return _unary(a, a.value.mean(), lambda g: np.full(shape, g / n))


def mean_rows(a: Node) -> Node:
    """Mean over the last axis of a matrix, giving a vector."""
    v = a.value
    n = v.shape[-1]
    return _unary(a, v.mean(axis=-1), lambda g: np.repeat(g[..., None] / n, n, axis=-1))


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(param) into every reachable ParamStore grad slot."""
    if not isinstance(loss, Node) or not loss.tracked:
        raise TapeError("backward called on a value with no recorded computation")
    if loss.value.size != 1:
        raise TapeError("backward needs a scalar loss")

    order: list[Node] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib
        if node.store is not None:
            node.store.grad_view(node.name)[...] += g


# --- plain numpy helpers shared by the no-grad fast paths ---------------------------

def sigmoid_np(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def log_softmax_np(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def leaky_relu_np(v: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return np.where(v > 0, v, slope * v)


# --- dense networks --------------------------------------------------------------------

@dataclass(frozen=True)
class DenseNetSpec:
    """Fully connected net: leaky-rectifier hidden layers, linear output layer."""

    widths: tuple[int, ...]
    negative_slope: float = 0.2

    def __post_init__(self):
        if len(self.widths) < 2 or any(int(w) < 1 for w in self.widths):
            raise ValueError(f"bad layer widths {self.widths}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def param_names(self, prefix: str) -> list[str]:
        names = []
        for i in range(self.n_layers):
            names += [f"{prefix}.{i}.w", f"{prefix}.{i}.b"]
        return names


def init_dense(spec: DenseNetSpec, prefix: str, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform fan-in scaled weights (He-uniform bound sqrt(6/fan_in)), zero biases."""
    arrays = {}
    for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        bound = np.sqrt(6.0 / fan_in)
        arrays[f"{prefix}.{i}.w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        arrays[f"{prefix}.{i}.b"] = np.zeros(fan_out)
    return arrays


def forward(spec: DenseNetSpec, store: ParamStore, prefix: str, x: np.ndarray) -> np.ndarray:
    """Evaluate the net on one input vector or a batch of row vectors (no recording)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != spec.widths[0]:
        raise ValueError(f"input width {h.shape[1]} != {spec.widths[0]}")
    for i in range(spec.n_layers):
        h = h @ store.view(f"{prefix}.{i}.w") + store.view(f"{prefix}.{i}.b")
        if i < spec.n_layers - 1:
            h = leaky_relu_np(h, spec.negative_slope)
    return h[0] if single else h


def forward_node(spec: DenseNetSpec, store: ParamStore, prefix: str, x) -> Node:
    """Recorded version of :func:`forward` for a batch of rows."""
    h = as_node(x)
    if h.value.ndim != 2 or h.shape[1] != spec.widths[0]:
        raise ValueError(f"input shape {h.shape} does not match width {spec.widths[0]}")
    for i in range(spec.n_layers):
        h = matmul(h, param(store, f"{prefix}.{i}.w")) + param(store, f"{prefix}.{i}.b")
        if i < spec.n_layers - 1:
            h = leaky_relu(h, spec.negative_slope)
    return h


# --- Adam ----------------------------------------------------------------------------

@dataclass
class AdamState:
    size: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)


def adam_step(store: ParamStore, state: AdamState) -> None:
    """Bias-corrected Adam update of ``store.values`` in place; clears the grads."""
    g = store.grads
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    store.values -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    store.zero_grad()
