"""Dense float64 tensors with tape-based reverse-mode differentiation.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. A :class:`Graph`
is an append-only tape of :class:`Node` records; each node holds its value,
the ids of its inputs and a closure mapping the upstream gradient to input
gradients. Because inputs always precede their consumers on the tape,
walking it backwards is a valid reverse topological order.

Gradients are summed into ``Node.grad`` and are never cleared implicitly.
Leaf nodes created with :meth:`Graph.variable` may alias an external gradient
buffer, which is how model parameters accumulate across a training step.
"""
from __future__ import annotations

from collections import Counter
from collections.abc import Callable, Sequence

import numpy as np

from .errors import InvalidRootError, InvalidShapeError, ShapeMismatchError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def tensor_new(shape: Sequence[int], fill: float = 0.0) -> np.ndarray:
    """Return a float64 tensor of ``shape`` with every element equal to ``fill``."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise InvalidShapeError(f"extents must all be >= 1, got {list(shape)}")
    return np.full(shape, float(fill), dtype=np.float64)


def as_tensor(data) -> np.ndarray:
    """Coerce ``data`` to a float64 tensor; scalars become shape (1,)."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.size == 0:
        raise InvalidShapeError(f"empty tensors are not allowed, got shape {arr.shape}")
    return arr


class Node:
    __slots__ = ("graph", "id", "value", "op", "inputs", "backward_fn", "requires_grad", "name", "_grad")

    def __init__(self, graph, id_, value, op, inputs, backward_fn, requires_grad, name=None, grad=None):
        self.graph = graph
        self.id = id_
        self.value = value
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name
        self._grad = grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise ShapeMismatchError(f"gradient shape {g.shape} does not match value shape {self.value.shape} ({self.op})")
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self._grad += g

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad[...] = 0.0

    def backward(self) -> None:
        backward(self.graph, self)

    def __add__(self, other):
        return add(self, _lift(self, other))

    def __radd__(self, other):
        return add(_lift(self, other), self)

    def __sub__(self, other):
        return sub(self, _lift(self, other))

    def __rsub__(self, other):
        return sub(_lift(self, other), self)

    def __mul__(self, other):
        return mul(self, _lift(self, other))

    def __rmul__(self, other):
        return mul(self, _lift(self, other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"


class Graph:
    """Append-only computation tape."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, value: np.ndarray, op: str, inputs: Sequence[Node], backward_fn: BackwardFn | None) -> Node:
        for inp in inputs:
            if inp.graph is not self:
                raise ValueError("operands belong to different graphs")
        requires_grad = backward_fn is not None and any(inp.requires_grad for inp in inputs)
        node = Node(self, len(self.nodes), value, op, tuple(inputs), backward_fn if requires_grad else None, requires_grad)
        self.nodes.append(node)
        return node

    def constant(self, value, name: str | None = None) -> Node:
        node = Node(self, len(self.nodes), as_tensor(value), "const", (), None, False, name)
        self.nodes.append(node)
        return node

    def variable(self, value, grad: np.ndarray | None = None, name: str | None = None) -> Node:
        """Leaf that receives gradients. ``grad`` may alias a persistent buffer."""
        value = as_tensor(value)
        if grad is not None and grad.shape != value.shape:
            raise ShapeMismatchError(f"grad buffer shape {grad.shape} != value shape {value.shape}")
        node = Node(self, len(self.nodes), value, "leaf", (), None, True, name, grad)
        self.nodes.append(node)
        return node

    def op_counts(self) -> Counter:
        return Counter(n.op for n in self.nodes)

    def backward(self, root: Node) -> None:
        backward(self, root)

    def release(self) -> None:
        """Drop every recorded node and closure.

        Nodes and the graph reference each other, so a finished tape would
        otherwise wait for the cycle collector while pinning its buffers.
        """
        for node in self.nodes:
            node.backward_fn = None
            node.inputs = ()
            node._grad = None
        self.nodes = []


def backward(graph: Graph, root: Node) -> None:
    """Seed ``root`` with gradient 1 and accumulate into all of its ancestors."""
    if root.graph is not graph:
        raise InvalidRootError("root does not belong to this graph")
    if root.value.shape != (1,):
        raise InvalidRootError(f"backward needs a scalar root of shape (1,), got {root.value.shape}")
    nodes = graph.nodes
    reached = bytearray(root.id + 1)
    reached[root.id] = 1
    root.accumulate(np.ones(1))
    for nid in range(root.id, -1, -1):
        if not reached[nid]:
            continue
        node = nodes[nid]
        if node.backward_fn is None:
            continue
        in_grads = node.backward_fn(node.grad)
        for inp, g in zip(node.inputs, in_grads):
            if g is None or not inp.requires_grad:
                continue
            reached[inp.id] = 1
            inp.accumulate(g)


def _lift(ref: Node, other) -> Node:
    if isinstance(other, Node):
        return other
    return ref.graph.constant(other)


def _graph(*nodes: Node) -> Graph:
    g = nodes[0].graph
    for n in nodes[1:]:
        if n.graph is not g:
            raise ValueError("operands belong to different graphs")
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

ELEMENTWISE_KINDS = ("add", "sub", "mul", "max")


def elementwise(kind: str, a: Node, b: Node) -> Node:
    """``a (kind) b`` where b has a's shape or is a shape-(1,) scalar."""
    if kind not in ELEMENTWISE_KINDS:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    g = _graph(a, b)
    av, bv = a.value, b.value
    scalar_b = bv.shape == (1,) and av.shape != (1,)
    if av.shape != bv.shape and not scalar_b:
        raise ShapeMismatchError(f"{kind}: shapes {av.shape} and {bv.shape} are incompatible")

    def reduce_b(gb):
        return gb.sum(keepdims=True).reshape(1) if scalar_b else gb

    if kind == "add":
        out = av + bv

        def bw(gr):
            return gr, reduce_b(gr)

    elif kind == "sub":
        out = av - bv

        def bw(gr):
            return gr, reduce_b(-gr)

    elif kind == "mul":
        out = av * bv

        def bw(gr):
            return (gr * bv if a.requires_grad else None), (reduce_b(gr * av) if b.requires_grad else None)

    else:
        take_a = av >= np.broadcast_to(bv, av.shape)
        out = np.where(take_a, av, bv)

        def bw(gr):
            return np.where(take_a, gr, 0.0), reduce_b(np.where(take_a, 0.0, gr))

    return g.record(out, kind, (a, b), bw)


def add(a: Node, b: Node) -> Node:
    return elementwise("add", a, b)


def sub(a: Node, b: Node) -> Node:
    return elementwise("sub", a, b)


def mul(a: Node, b: Node) -> Node:
    return elementwise("mul", a, b)


def maximum(a: Node, b: Node) -> Node:
    return elementwise("max", a, b)


def scale(a: Node, c: float) -> Node:
    """Multiply by a Python constant (no graph node for the constant)."""
    c = float(c)
    return a.graph.record(a.value * c, "scale", (a,), lambda gr: (gr * c,))


def matmul(a: Node, b: Node) -> Node:
    g = _graph(a, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeMismatchError(f"matmul: cannot multiply {av.shape} by {bv.shape}")

    def bw(gr):
        return (gr @ bv.T if a.requires_grad else None), (av.T @ gr if b.requires_grad else None)

    return g.record(av @ bv, "matmul", (a, b), bw)


def sum_all(a: Node) -> Node:
    shape = a.value.shape
    return a.graph.record(np.array([a.value.sum()]), "sum", (a,), lambda gr: (np.full(shape, gr[0]),))


def mean_all(a: Node) -> Node:
    shape, n = a.value.shape, a.value.size
    return a.graph.record(np.array([a.value.sum() / n]), "mean", (a,), lambda gr: (np.full(shape, gr[0] / n),))


def reshape(a: Node, shape: Sequence[int]) -> Node:
    old = a.value.shape
    out = a.value.reshape(tuple(shape))
    return a.graph.record(out, "reshape", (a,), lambda gr: (gr.reshape(old),))


def add_channel_bias(x: Node, b: Node) -> Node:
    """Add a per-channel bias b[c] along axis 1 of x[n, c, ...]."""
    g = _graph(x, b)
    if b.value.ndim != 1 or x.value.ndim < 2 or x.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatchError(f"bias {b.value.shape} does not match channels of {x.value.shape}")
    bshape = (1, -1) + (1,) * (x.value.ndim - 2)
    axes = (0,) + tuple(range(2, x.value.ndim))

    def bw(gr):
        return gr, (gr.sum(axis=axes) if b.requires_grad else None)

    return g.record(x.value + b.value.reshape(bshape), "bias", (x, b), bw)
