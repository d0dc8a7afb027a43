"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Nodes form an acyclic computation graph; ``backward`` walks it once in
reverse topological order and accumulates gradients into every reachable
leaf. Only the operations needed by the training losses are provided:
matmul, broadcast add/mul/div, relu (max with zero), sigmoid, tanh, exp,
floored log, row softmax, sum/mean, absolute value, scalar power and
transpose. Everything is float64 and single-threaded, so identical seeds
give bitwise-identical trajectories.
"""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

EPS = 1e-12


class ShapeMismatch(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NonFiniteGradient(RuntimeError):
    """A parameter gradient contains NaN or inf; carries the parameter name."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Node:
    """One value in the computation graph.

    ``value`` and ``grad`` always have the same shape. ``parents`` holds the
    input nodes and ``_vjps`` the matching vector-Jacobian closures used by
    ``backward``. Leaves created via :func:`param` participate in gradient
    accumulation; leaves from :func:`constant` are carried along untouched.
    """

    __slots__ = ("value", "grad", "op", "parents", "_vjps", "requires_grad",
                 "_backward_done")

    def __init__(self, value, op: str = "leaf", parents: tuple = (),
                 vjps: tuple = (), requires_grad: bool = False):
        self.value = _as_array(value)
        self.grad = np.zeros_like(self.value)
        self.op = op
        self.parents = parents
        self._vjps = vjps
        self.requires_grad = requires_grad
        self._backward_done = False

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    # operator sugar; plain numbers/arrays are lifted to constants
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __rmatmul__(self, other):
        return matmul(_lift(other), self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __neg__(self):
        return neg(self)


def constant(x) -> Node:
    """Leaf node that never receives a gradient."""
    return Node(x, op="const")


def param(x) -> Node:
    """Trainable leaf node; ``backward`` accumulates into its ``grad``."""
    return Node(x, op="param", requires_grad=True)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Node, b: Node, opname: str):
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ShapeMismatch(
            f"{opname}: shapes {a.value.shape} and {b.value.shape} do not conform"
        ) from None


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "add")
    out = a.value + b.value
    return Node(out, op="add", parents=(a, b), vjps=(
        lambda g: _unbroadcast(g, a.value.shape),
        lambda g: _unbroadcast(g, b.value.shape),
    ))


def neg(a: Node) -> Node:
    return Node(-a.value, op="neg", parents=(a,), vjps=(lambda g: -g,))


def mul(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "mul")
    out = a.value * b.value
    return Node(out, op="mul", parents=(a, b), vjps=(
        lambda g: _unbroadcast(g * b.value, a.value.shape),
        lambda g: _unbroadcast(g * a.value, b.value.shape),
    ))


def div(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "div")
    out = a.value / b.value
    return Node(out, op="div", parents=(a, b), vjps=(
        lambda g: _unbroadcast(g / b.value, a.value.shape),
        lambda g: _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
    ))


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatch(
            f"matmul: shapes {a.value.shape} and {b.value.shape} do not conform"
        )
    out = a.value @ b.value
    return Node(out, op="matmul", parents=(a, b), vjps=(
        lambda g: g @ b.value.T,
        lambda g: a.value.T @ g,
    ))


def transpose(a: Node) -> Node:
    return Node(a.value.T, op="transpose", parents=(a,), vjps=(lambda g: g.T,))


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def relu(a: Node) -> Node:
    """max(x, 0); subgradient 0 at the kink."""
    mask = a.value > 0
    return Node(np.where(mask, a.value, 0.0), op="relu", parents=(a,),
                vjps=(lambda g: g * mask,))


def absolute(a: Node) -> Node:
    """|x|; subgradient 0 at the kink."""
    sign = np.sign(a.value)
    return Node(np.abs(a.value), op="abs", parents=(a,),
                vjps=(lambda g: g * sign,))


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Node) -> Node:
    s = _sigmoid_values(a.value)
    return Node(s, op="sigmoid", parents=(a,), vjps=(lambda g: g * s * (1.0 - s),))


def tanh(a: Node) -> Node:
    t = np.tanh(a.value)
    return Node(t, op="tanh", parents=(a,), vjps=(lambda g: g * (1.0 - t * t),))


def exp(a: Node) -> Node:
    e = np.exp(a.value)
    return Node(e, op="exp", parents=(a,), vjps=(lambda g: g * e,))


def log(a: Node) -> Node:
    """log with an input floor of EPS; zero gradient below the floor."""
    floored = np.maximum(a.value, EPS)
    above = a.value > EPS
    return Node(np.log(floored), op="log", parents=(a,),
                vjps=(lambda g: g * np.where(above, 1.0 / floored, 0.0),))


def power(a: Node, exponent: float) -> Node:
    """Elementwise x**q for a fixed scalar exponent.

    For q < 1 the gradient denominator is floored at EPS so the derivative
    stays finite when the base touches zero (forward values are exact).
    """
    q = float(exponent)
    out = a.value ** q
    if q < 1.0:
        def vjp(g):
            base = np.maximum(a.value, EPS)
            return g * q * base ** (q - 1.0)
    else:
        def vjp(g):
            return g * q * a.value ** (q - 1.0)
    return Node(out, op="power", parents=(a,), vjps=(vjp,))


def _softmax_values(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Node) -> Node:
    """Row softmax over the last axis; rows sum to 1 within 1e-12."""
    s = _softmax_values(a.value)

    def vjp(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return s * (g - dot)

    return Node(s, op="softmax", parents=(a,), vjps=(vjp,))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def nsum(a: Node, axis: int | None = None) -> Node:
    """Sum to a scalar, or along axis 0/1 with keepdims."""
    if axis is None:
        out = a.value.sum()
        return Node(out, op="sum", parents=(a,),
                    vjps=(lambda g: np.broadcast_to(g, a.value.shape).copy(),))
    out = a.value.sum(axis=axis, keepdims=True)
    return Node(out, op="sum", parents=(a,),
                vjps=(lambda g: np.broadcast_to(g, a.value.shape).copy(),))


def mean(a: Node) -> Node:
    n = a.value.size
    out = a.value.mean()
    return Node(out, op="mean", parents=(a,),
                vjps=(lambda g: np.broadcast_to(g / n, a.value.shape).copy(),))


def maximum(a: Node, b: Node) -> Node:
    """Elementwise max via b + relu(a - b); ties take the b branch."""
    return add(b, relu(add(a, neg(b))))


def clamp(a: Node, lo: float, hi: float) -> Node:
    """Piecewise-linear clamp to [lo, hi] with unit gradient inside."""
    return constant(lo) + relu(a - lo) - relu(a - hi)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """Populate ``grad`` on every node reachable from ``loss``.

    ``loss`` must be scalar. A second call on the same node is rejected;
    rebuild the graph (or reset gradients) between steps instead.
    """
    if loss.value.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.value.shape}")
    if loss._backward_done:
        raise RuntimeError("backward already called on this node; rebuild the graph")
    loss._backward_done = True

    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        g = node.grad
        for parent, vjp in zip(node.parents, node._vjps):
            parent.grad = parent.grad + vjp(g)


# ---------------------------------------------------------------------------
# parameters and the optimiser
# ---------------------------------------------------------------------------

class ParamSet:
    """Named trainable matrices with deterministic iteration order."""

    def __init__(self):
        self._params: dict[str, Node] = {}

    def add(self, name: str, value) -> Node:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        node = param(value)
        self._params[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Node]]:
        return iter(self._params.items())

    def zero_grad(self) -> None:
        for node in self._params.values():
            node.grad = np.zeros_like(node.value)

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, node in self._params.items():
            src = np.asarray(values[k], dtype=np.float64)
            if src.shape != node.value.shape:
                raise ShapeMismatch(
                    f"parameter {k!r}: stored shape {src.shape} vs model shape {node.value.shape}"
                )
            node.value = src.copy()
            node.grad = np.zeros_like(node.value)


class Adam:
    """Adam update (beta1=0.9, beta2=0.999, eps=1e-8); zeroes grads after a step.

    ``lr_overrides`` maps parameter-name prefixes to rates; the longest
    matching prefix wins, so heads of one model can train at different speeds.
    """

    def __init__(self, params: ParamSet, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 lr_overrides: dict[str, float] | None = None):
        self.params = params
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.lr_overrides = dict(lr_overrides or {})
        self.t = 0
        self._m = {k: np.zeros_like(v.value) for k, v in params.items()}
        self._v = {k: np.zeros_like(v.value) for k, v in params.items()}

    def _rate(self, name: str) -> float:
        best, rate = -1, self.lr
        for prefix, lr in self.lr_overrides.items():
            if name.startswith(prefix) and len(prefix) > best:
                best, rate = len(prefix), lr
        return rate

    def step(self) -> None:
        for name, node in self.params.items():
            if not np.all(np.isfinite(node.grad)):
                raise NonFiniteGradient(f"non-finite gradient in parameter {name!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, node in self.params.items():
            g = node.grad
            m = self._m[name] = self.beta1 * self._m[name] + (1.0 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            node.value = node.value - self._rate(name) * m_hat / (np.sqrt(v_hat) + self.eps)
        self.params.zero_grad()
