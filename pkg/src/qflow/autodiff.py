"""Define-by-run reverse-mode automatic differentiation over float64 arrays.

A :class:`Tape` records primitive operations in execution order. Every
recorded value is a :class:`Node`; calling :meth:`Tape.backward` on a scalar
node walks the tape in reverse and accumulates adjoints for every node that
depends on a trainable leaf.

    >>> tape = Tape()
    >>> x = tape.variable([3.0])
    >>> y = (x * x).sum()
    >>> float(tape.backward(y)[x][0])
    6.0
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ContractViolation",
    "NonFiniteError",
    "Node",
    "Tape",
    "Gradients",
    "PRIMITIVES",
    "gelu",
    "gelu_grad",
    "relu",
]


class ContractViolation(ValueError):
    """An operation was called with inputs outside its contract."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


_GELU_C = math.sqrt(2.0 / math.pi)


def relu(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0)


def gelu(a: np.ndarray) -> np.ndarray:
    # tanh approximation
    return 0.5 * a * (1.0 + np.tanh(_GELU_C * (a + 0.044715 * a**3)))


def gelu_grad(a: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (a + 0.044715 * a**3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * a**2)
    return 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(
            f"{kind}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


# Each primitive is (check, forward, backward). ``backward`` receives the
# output adjoint, the input values, the output value and the op attributes,
# and returns one adjoint per input.


def _check_matmul(vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: shapes {a.shape} and {b.shape} do not conform")


def _check_binary(kind):
    def check(vals, attrs):
        _broadcast_shape(kind, *vals)

    return check


def _check_concat(vals, attrs):
    axis = attrs.get("axis", -1)
    ref = vals[0]
    for v in vals[1:]:
        if v.ndim != ref.ndim:
            raise ContractViolation(f"concat: shapes {ref.shape} and {v.shape} differ in rank")
        sa = list(ref.shape)
        sb = list(v.shape)
        del sa[axis], sb[axis]
        if sa != sb:
            raise ContractViolation(f"concat: shapes {ref.shape} and {v.shape} do not conform")


def _check_broadcast(vals, attrs):
    (a,) = vals
    shape = tuple(attrs["shape"])
    try:
        if np.broadcast_shapes(a.shape, shape) != shape:
            raise ValueError
    except ValueError:
        raise ContractViolation(f"broadcast: shape {a.shape} cannot broadcast to {shape}") from None


def _none(vals, attrs):
    pass


def _sum_back(g, vals, out, attrs):
    (a,) = vals
    axis = attrs.get("axis")
    if axis is not None and not attrs.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape),)


def _mean_back(g, vals, out, attrs):
    (a,) = vals
    axis = attrs.get("axis")
    count = a.size if axis is None else a.shape[axis]
    (ga,) = _sum_back(g, vals, out, attrs)
    return (ga / count,)


def _concat_back(g, vals, out, attrs):
    axis = attrs.get("axis", -1)
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


PRIMITIVES: dict[str, tuple[Callable, Callable, Callable]] = {
    "matmul": (
        _check_matmul,
        lambda vals, attrs: vals[0] @ vals[1],
        lambda g, vals, out, attrs: (g @ vals[1].T, vals[0].T @ g),
    ),
    "add": (
        _check_binary("add"),
        lambda vals, attrs: vals[0] + vals[1],
        lambda g, vals, out, attrs: (_unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)),
    ),
    "sub": (
        _check_binary("sub"),
        lambda vals, attrs: vals[0] - vals[1],
        lambda g, vals, out, attrs: (_unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape)),
    ),
    "mul": (
        _check_binary("mul"),
        lambda vals, attrs: vals[0] * vals[1],
        lambda g, vals, out, attrs: (
            _unbroadcast(g * vals[1], vals[0].shape),
            _unbroadcast(g * vals[0], vals[1].shape),
        ),
    ),
    "scale": (
        _none,
        lambda vals, attrs: vals[0] * attrs["c"],
        lambda g, vals, out, attrs: (g * attrs["c"],),
    ),
    "relu": (
        _none,
        lambda vals, attrs: relu(vals[0]),
        lambda g, vals, out, attrs: (g * (vals[0] > 0.0),),
    ),
    "gelu": (
        _none,
        lambda vals, attrs: gelu(vals[0]),
        lambda g, vals, out, attrs: (g * gelu_grad(vals[0]),),
    ),
    "square": (
        _none,
        lambda vals, attrs: vals[0] * vals[0],
        lambda g, vals, out, attrs: (2.0 * vals[0] * g,),
    ),
    "sum": (
        _none,
        lambda vals, attrs: np.sum(vals[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)),
        _sum_back,
    ),
    "mean": (
        _none,
        lambda vals, attrs: np.mean(vals[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)),
        _mean_back,
    ),
    "concat": (
        _check_concat,
        lambda vals, attrs: np.concatenate(vals, axis=attrs.get("axis", -1)),
        _concat_back,
    ),
    "broadcast": (
        _check_broadcast,
        lambda vals, attrs: np.broadcast_to(vals[0], tuple(attrs["shape"])).copy(),
        lambda g, vals, out, attrs: (_unbroadcast(g, vals[0].shape),),
    ),
}


class Node:
    """A value recorded on a tape."""

    __slots__ = ("tape", "index", "value", "op", "inputs", "attrs", "requires_grad", "name")

    def __init__(self, tape, index, value, op, inputs, attrs, requires_grad, name=None):
        self.tape = tape
        self.index = index
        self.value = value
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}#{self.index}, shape={self.shape})"

    # operator sugar; scalars go through ``scale`` so they never become nodes
    def __add__(self, other):
        return self.tape.add(self, other)

    def __radd__(self, other):
        return self.tape.add(other, self)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.tape.scale(self, other)
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __rmatmul__(self, other):
        return self.tape.matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return self.tape.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return self.tape.mean(self, axis=axis, keepdims=keepdims)


class Gradients:
    """Adjoints produced by :meth:`Tape.backward`, looked up by node."""

    def __init__(self, tape: "Tape", adjoints: list):
        self._tape = tape
        self._adjoints = adjoints

    def __getitem__(self, node: Node) -> np.ndarray:
        if node.tape is not self._tape or node.index >= len(self._adjoints):
            raise KeyError(f"{node!r} is not on this tape")
        g = self._adjoints[node.index]
        if g is None:
            return np.zeros(node.shape)
        return g

    def __contains__(self, node) -> bool:
        return isinstance(node, Node) and node.tape is self._tape and node.index < len(self._adjoints)

    def get(self, nodes: Iterable[Node]) -> list[np.ndarray]:
        return [self[n] for n in nodes]


class Tape:
    """Ordered record of primitive operations.

    Parameters
    ----------
    check_finite : bool
        Reject NaN/Inf at leaf creation and after every primitive.
    """

    def __init__(self, check_finite: bool = True):
        self.check_finite = check_finite
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _record(self, value, op, inputs, attrs, requires_grad, name=None) -> Node:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite value produced by {op}" + (f" ({name})" if name else ""))
        value.flags.writeable = False
        node = Node(self, len(self.nodes), value, op, inputs, attrs, requires_grad, name)
        self.nodes.append(node)
        return node

    def variable(self, value, name: str | None = None) -> Node:
        """Trainable leaf; gradients flow into it."""
        return self._record(np.array(value, dtype=np.float64), "leaf", (), {}, True, name)

    def constant(self, value, name: str | None = None) -> Node:
        """Leaf that never receives a gradient."""
        return self._record(np.array(value, dtype=np.float64), "const", (), {}, False, name)

    def _as_node(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise ContractViolation(f"{x!r} belongs to another tape")
            return x
        return self.constant(x)

    def forward_op(self, kind: str, *inputs, **attrs) -> Node:
        """Evaluate primitive ``kind`` on ``inputs`` and record it."""
        try:
            check, fwd, _ = PRIMITIVES[kind]
        except KeyError:
            raise ContractViolation(f"unknown primitive {kind!r}") from None
        nodes = tuple(self._as_node(x) for x in inputs)
        vals = [n.value for n in nodes]
        check(vals, attrs)
        out = np.asarray(fwd(vals, attrs), dtype=np.float64)
        return self._record(out, kind, nodes, attrs, any(n.requires_grad for n in nodes))

    # named wrappers
    def matmul(self, a, b):
        return self.forward_op("matmul", a, b)

    def add(self, a, b):
        return self.forward_op("add", a, b)

    def sub(self, a, b):
        return self.forward_op("sub", a, b)

    def mul(self, a, b):
        return self.forward_op("mul", a, b)

    def scale(self, a, c: float):
        return self.forward_op("scale", a, c=float(c))

    def relu(self, a):
        return self.forward_op("relu", a)

    def gelu(self, a):
        return self.forward_op("gelu", a)

    def square(self, a):
        return self.forward_op("square", a)

    def sum(self, a, axis=None, keepdims=False):
        return self.forward_op("sum", a, axis=axis, keepdims=keepdims)

    def mean(self, a, axis=None, keepdims=False):
        return self.forward_op("mean", a, axis=axis, keepdims=keepdims)

    def concat(self, parts: Sequence, axis: int = -1):
        return self.forward_op("concat", *parts, axis=axis)

    def broadcast(self, a, shape):
        return self.forward_op("broadcast", a, shape=tuple(shape))

    def backward(self, root: Node) -> Gradients:
        """Reverse sweep from scalar ``root``."""
        root = self._as_node(root)
        if root.value.size != 1:
            raise ContractViolation(f"backward needs a scalar root, got shape {root.shape}")
        adj: list = [None] * (root.index + 1)
        adj[root.index] = np.ones_like(root.value)
        for i in range(root.index, -1, -1):
            g = adj[i]
            if g is None:
                continue
            node = self.nodes[i]
            if not node.inputs:
                continue
            _, _, back = PRIMITIVES[node.op]
            grads = back(g, [n.value for n in node.inputs], node.value, node.attrs)
            for inp, gi in zip(node.inputs, grads):
                if not inp.requires_grad:
                    continue
                if adj[inp.index] is None:
                    adj[inp.index] = np.array(gi, dtype=np.float64)
                else:
                    adj[inp.index] = adj[inp.index] + gi
        return Gradients(self, adj)

    def grad_wrt_input(self, root: Node, node: Node) -> np.ndarray:
        """d root / d node for a node recorded on this tape."""
        if not isinstance(node, Node) or node.tape is not self:
            raise KeyError(f"{node!r} is not on this tape")
        if not node.requires_grad:
            raise ContractViolation(f"{node!r} does not require grad; record it with variable()")
        return self.backward(root)[node]


def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g
