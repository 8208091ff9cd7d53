"""Small reverse-mode differentiation engine over numpy arrays.

A graph is built lazily: creating a node only records the operation and its
parents.  :func:`forward` evaluates every node of a graph in topological
order and :func:`backward` runs one reverse sweep from a scalar root.

Second derivatives are never taped.  Where a loss needs the input gradient of
a model, the model writes that gradient out analytically as ordinary graph
nodes (see ``models``), so a single reverse pass gives parameter gradients of
the loss.

Nodes carry whole arrays so a batch of samples flows through one graph; each
element still behaves as an independent scalar of the computation.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import NumericalError, UsageError

__all__ = [
    "Node",
    "Op",
    "ParameterStore",
    "backward",
    "concat",
    "constant",
    "cos",
    "einsum",
    "exp",
    "forward",
    "log",
    "matmul",
    "reshape",
    "sin",
    "sqrt",
    "square",
    "sum",
    "tanh",
    "variable",
]

_counter = itertools.count()


class Op:
    """One primitive.  Subclasses implement ``compute`` and ``vjp``."""

    name = "op"

    def compute(self, *values):
        raise NotImplementedError

    def vjp(self, g, out, *values):
        """Return one cotangent per parent (``None`` for no contribution)."""
        raise NotImplementedError


class Node:
    """A vertex of the computation graph.

    Leaves have ``op is None``; their value is set at construction or later
    through :attr:`value`.  Parameter leaves read their value from a
    :class:`ParameterStore` every time the graph is evaluated.
    """

    __slots__ = ("op", "parents", "value", "adjoint", "label", "uid", "_param", "_order")
    __array_priority__ = 1000

    def __init__(self, op=None, parents=(), value=None, label=None):
        self.op = op
        self.parents = tuple(parents)
        self.value = value
        self.adjoint = None
        self.label = label
        self.uid = next(_counter)
        self._param = None
        self._order = None

    def __repr__(self):
        kind = self.op.name if self.op is not None else "leaf"
        shape = None if self.value is None else np.shape(self.value)
        return f"Node({kind}, label={self.label!r}, shape={shape})"

    @property
    def is_leaf(self):
        return self.op is None

    @property
    def shape(self):
        return np.shape(self.value)

    def describe(self):
        kind = self.op.name if self.op is not None else "leaf"
        return f"{kind}#{self.uid}" + (f" ({self.label})" if self.label else "")

    def __add__(self, other):
        return _apply(_ADD, self, other)

    def __radd__(self, other):
        return _apply(_ADD, other, self)

    def __sub__(self, other):
        return _apply(_SUB, self, other)

    def __rsub__(self, other):
        return _apply(_SUB, other, self)

    def __mul__(self, other):
        return _apply(_MUL, self, other)

    def __rmul__(self, other):
        return _apply(_MUL, other, self)

    def __truediv__(self, other):
        return _apply(_DIV, self, other)

    def __rtruediv__(self, other):
        return _apply(_DIV, other, self)

    def __neg__(self):
        return _apply(_NEG, self)

    def __pow__(self, exponent):
        if isinstance(exponent, Node):
            raise TypeError("only constant exponents are supported")
        return _apply(_Pow(float(exponent)), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return _apply(_Index(index), self)


def constant(value, label=None):
    return Node(value=np.asarray(value, dtype=np.float64), label=label)


def variable(value=None, label=None):
    """An input leaf whose value may be (re)assigned before each forward."""
    if value is not None:
        value = np.asarray(value, dtype=np.float64)
    return Node(value=value, label=label)


def as_node(x):
    return x if isinstance(x, Node) else constant(x)


def _apply(op, *args):
    return Node(op, [as_node(a) for a in args])


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class _Add(Op):
    name = "add"

    def compute(self, a, b):
        return a + b

    def vjp(self, g, out, a, b):
        return _unbroadcast(g, np.shape(a)), _unbroadcast(g, np.shape(b))


class _Sub(Op):
    name = "sub"

    def compute(self, a, b):
        return a - b

    def vjp(self, g, out, a, b):
        return _unbroadcast(g, np.shape(a)), -_unbroadcast(g, np.shape(b))


class _Mul(Op):
    name = "mul"

    def compute(self, a, b):
        return a * b

    def vjp(self, g, out, a, b):
        return _unbroadcast(g * b, np.shape(a)), _unbroadcast(g * a, np.shape(b))


class _Div(Op):
    name = "div"

    def compute(self, a, b):
        return a / b

    def vjp(self, g, out, a, b):
        return _unbroadcast(g / b, np.shape(a)), _unbroadcast(-g * out / b, np.shape(b))


class _Neg(Op):
    name = "neg"

    def compute(self, a):
        return -a

    def vjp(self, g, out, a):
        return (-g,)


class _Pow(Op):
    name = "pow"

    def __init__(self, exponent):
        self.exponent = exponent

    def compute(self, a):
        return a**self.exponent

    def vjp(self, g, out, a):
        return (g * self.exponent * a ** (self.exponent - 1.0),)


class _Index(Op):
    name = "index"

    def __init__(self, index):
        self.index = index

    def compute(self, a):
        return a[self.index]

    def vjp(self, g, out, a):
        full = np.zeros(np.shape(a))
        np.add.at(full, self.index, g)
        return (full,)


class _Unary(Op):
    def __init__(self, name, f, df):
        self.name = name
        self.f = f
        self.df = df

    def compute(self, a):
        return self.f(a)

    def vjp(self, g, out, a):
        return (g * self.df(a, out),)


_ADD, _SUB, _MUL, _DIV, _NEG = _Add(), _Sub(), _Mul(), _Div(), _Neg()
_TANH = _Unary("tanh", np.tanh, lambda a, out: 1.0 - out * out)
_SIN = _Unary("sin", np.sin, lambda a, out: np.cos(a))
_COS = _Unary("cos", np.cos, lambda a, out: -np.sin(a))
_EXP = _Unary("exp", np.exp, lambda a, out: out)
_LOG = _Unary("log", np.log, lambda a, out: 1.0 / a)
_SQRT = _Unary("sqrt", np.sqrt, lambda a, out: 0.5 / out)
_SQUARE = _Unary("square", np.square, lambda a, out: 2.0 * a)


def tanh(x):
    return _apply(_TANH, x)


def sin(x):
    return _apply(_SIN, x)


def cos(x):
    return _apply(_COS, x)


def exp(x):
    return _apply(_EXP, x)


def log(x):
    return _apply(_LOG, x)


def sqrt(x):
    return _apply(_SQRT, x)


def square(x):
    return _apply(_SQUARE, x)


class _Sum(Op):
    name = "sum"

    def __init__(self, axis):
        self.axis = axis

    def compute(self, a):
        return np.sum(a, axis=self.axis)

    def vjp(self, g, out, a):
        if self.axis is not None:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, np.shape(a)).copy(),)


def sum(x, axis=None):  # noqa: A001 - mirrors numpy
    if isinstance(axis, list):
        axis = tuple(axis)
    return _apply(_Sum(axis), x)


class _MatMul(Op):
    name = "matmul"

    def compute(self, a, b):
        return a @ b

    def vjp(self, g, out, a, b):
        return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g


_MATMUL = _MatMul()


def matmul(a, b):
    return _apply(_MATMUL, a, b)


class _Einsum(Op):
    """Two-operand einsum with explicit output subscripts."""

    name = "einsum"

    def __init__(self, subscripts):
        lhs, out = subscripts.replace(" ", "").split("->")
        self.ins = lhs.split(",")
        self.out = out
        if len(self.ins) != 2:
            raise ValueError("einsum node takes exactly two operands")
        for i, term in enumerate(self.ins):
            other = self.ins[1 - i]
            if any(c not in out and c not in other for c in term):
                raise ValueError(f"index in {term!r} summed without partner: {subscripts}")
        self.subscripts = subscripts

    def compute(self, a, b):
        return np.einsum(self.subscripts, a, b, optimize=True)

    def vjp(self, g, out, a, b):
        sa, sb = self.ins
        ga = np.einsum(f"{self.out},{sb}->{sa}", g, b, optimize=True)
        gb = np.einsum(f"{self.out},{sa}->{sb}", g, a, optimize=True)
        return ga, gb


def einsum(subscripts, a, b):
    return _apply(_Einsum(subscripts), a, b)


class _Reshape(Op):
    name = "reshape"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def compute(self, a):
        return np.reshape(a, self.shape)

    def vjp(self, g, out, a):
        return (np.reshape(g, np.shape(a)),)


def reshape(x, shape):
    return _apply(_Reshape(shape), x)


class _Concat(Op):
    name = "concat"

    def __init__(self, axis):
        self.axis = axis

    def compute(self, *values):
        return np.concatenate(values, axis=self.axis)

    def vjp(self, g, out, *values):
        sizes = np.cumsum([np.shape(v)[self.axis] for v in values])[:-1]
        return tuple(np.split(g, sizes, axis=self.axis))


def concat(nodes, axis=-1):
    return _apply(_Concat(axis), *nodes)


class ParameterStore:
    """All trainable parameters of one model as a flat float64 vector.

    Components register named blocks while the model is being built; after
    :meth:`freeze` the layout is fixed.  :meth:`node` hands out graph leaves
    whose values are views into the flat vector, so an optimizer writing
    :attr:`theta` in place is seen by the next forward pass.
    """

    def __init__(self):
        self._blocks = {}
        self._chunks = []
        self._size = 0
        self._frozen = False
        self.theta = np.zeros(0)

    def add(self, name, value):
        if self._frozen:
            raise UsageError("parameter layout is fixed after freeze()")
        if name in self._blocks:
            raise ValueError(f"duplicate parameter block {name!r}")
        value = np.array(value, dtype=np.float64)
        self._blocks[name] = (slice(self._size, self._size + value.size), value.shape)
        self._chunks.append(value.ravel())
        self._size += value.size

    def freeze(self):
        if not self._frozen:
            self.theta = np.concatenate(self._chunks) if self._chunks else np.zeros(0)
            self._chunks = []
            self._frozen = True
        return self

    @property
    def size(self):
        return self._size

    @property
    def names(self):
        return list(self._blocks)

    def slices(self):
        return {name: sl for name, (sl, _) in self._blocks.items()}

    def shape(self, name):
        return self._blocks[name][1]

    def get(self, name):
        if not self._frozen:
            raise UsageError("call freeze() before reading parameters")
        sl, shape = self._blocks[name]
        return self.theta[sl].reshape(shape)

    def set_flat(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self._size,):
            raise ValueError(f"expected {self._size} parameters, got shape {theta.shape}")
        self.theta[:] = theta

    def node(self, name):
        n = Node(value=self.get(name), label=name)
        n._param = (self, name)
        return n


def _topological_order(root):
    if root._order is not None:
        return root._order
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.uid in seen:
            continue
        seen.add(node.uid)
        stack.append((node, True))
        for parent in node.parents:
            if parent.uid not in seen:
                stack.append((parent, False))
    root._order = order
    return order


def forward(root):
    """Evaluate every node reachable from ``root``; return the root value."""
    for node in _topological_order(root):
        if node.op is None:
            if node._param is not None:
                store, name = node._param
                node.value = store.get(name)
            elif node.value is None:
                raise UsageError(f"leaf {node.describe()} has no value")
            continue
        with np.errstate(all="ignore"):
            value = np.asarray(node.op.compute(*(p.value for p in node.parents)), dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericalError(f"non-finite value produced at node {node.describe()}")
        node.value = value
    return root.value


def backward(root):
    """Reverse sweep from a scalar ``root``.

    Every node's ``adjoint`` is filled with d(root)/d(node).  Returns the
    gradient with respect to the flat parameter vector of the (single)
    :class:`ParameterStore` whose leaves appear in the graph, or an empty
    array if there are none.
    """
    order = _topological_order(root)
    if any(n.value is None for n in order):
        raise UsageError("backward() called before forward()")
    if np.size(root.value) != 1:
        raise UsageError("backward() needs a scalar root")
    for node in order:
        node.adjoint = None
    root.adjoint = np.ones(np.shape(root.value))
    for node in reversed(order):
        g = node.adjoint
        if node.op is None or g is None:
            continue
        with np.errstate(all="ignore"):
            grads = node.op.vjp(g, node.value, *(p.value for p in node.parents))
        for parent, pg in zip(node.parents, grads):
            if pg is None:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            parent.adjoint = pg if parent.adjoint is None else parent.adjoint + pg

    store = None
    for node in order:
        if node._param is not None:
            if store is not None and node._param[0] is not store:
                raise UsageError("graph mixes parameters from several stores")
            store = node._param[0]
    if store is None:
        return np.zeros(0)
    grad = np.zeros(store.size)
    slices = store.slices()
    for node in order:
        if node._param is not None and node.adjoint is not None:
            grad[slices[node._param[1]]] += np.ravel(node.adjoint)
    return grad
