"""Reverse-mode automatic differentiation with differentiable backward passes.

Every primitive defines a forward rule on numpy arrays and a backward rule
written in terms of other primitives.  When ``backward`` runs with
``create_graph=True`` those rules are recorded on the graph like any other
computation, so the returned gradients can themselves be differentiated.
This is what lets a force loss (a function of dE/dR) be minimised with
respect to model parameters.

All values are float64.

Example:

    >>> x = Variable(3.0, requires_grad=True)
    >>> y = square(x)
    >>> g = backward(y, [x], create_graph=True)[x]
    >>> float(g.value), float(backward(g, [x])[x].value)
    (6.0, 2.0)
"""

from __future__ import annotations

import math
import threading
import warnings
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np

LN2 = math.log(2.0)


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy a primitive's shape rule."""


class UnreachableGradientWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# graph bookkeeping
# ---------------------------------------------------------------------------

class _State(threading.local):
    def __init__(self):
        self.recording = True
        self.stack: list[Graph] = []
        self.default: Graph | None = None


_state = _State()


class Node:
    """One recorded operation. The output is held weakly to avoid cycles."""

    __slots__ = ("op", "inputs", "meta", "index", "graph", "_out")

    def __init__(self, op, inputs, meta, graph, index):
        self.op = op
        self.inputs = inputs
        self.meta = meta
        self.graph = graph
        self.index = index
        self._out = None

    @property
    def output(self) -> Variable | None:
        return self._out() if self._out is not None else None

    def __repr__(self):
        return f"Node({self.index}: {self.op.name})"


class Graph:
    """Append-only record of operations, in topological order.

    Use as a context manager to direct new operations to this graph::

        with Graph() as g:
            y = ssp(x)
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.generation = 0

    def __enter__(self):
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def _append(self, op, inputs, meta) -> Node:
        node = Node(op, inputs, meta, weakref.ref(self), len(self.nodes))
        self.nodes.append(node)
        return node

    def reset(self):
        """Drop all nodes and start a new generation.

        Variables created before the reset keep their values but can no
        longer be differentiated through this graph.
        """
        for node in self.nodes:
            node.graph = None
        self.nodes = []
        self.generation += 1

    def replay(self) -> list[np.ndarray]:
        """Re-run every node's forward rule from its recorded inputs."""
        return [n.op.forward(*[v.value for v in n.inputs], **n.meta)
                for n in self.nodes]


def current_graph() -> Graph:
    if _state.stack:
        return _state.stack[-1]
    if _state.default is None:
        _state.default = Graph()
    return _state.default


def reset_default_graph():
    _state.default = Graph()


class no_grad:
    """Context manager that disables recording; results are constants."""

    def __enter__(self):
        self._prev = _state.recording
        _state.recording = False

    def __exit__(self, *exc):
        _state.recording = self._prev
        return False


# ---------------------------------------------------------------------------
# Variable
# ---------------------------------------------------------------------------

class Variable:
    """A float64 array that may participate in differentiation."""

    __slots__ = ("value", "requires_grad", "node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def graph(self) -> Graph | None:
        if self.node is None or self.node.graph is None:
            return None
        return self.node.graph()

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> Variable:
        return Variable(self.value)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Variable(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _as_var(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_var(other, self.shape))

    def __rsub__(self, other):
        return sub(_as_var(other, self.shape), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return affine(self, float(other), 0.0)
        return mul(self, _as_var(other, self.shape))

    __rmul__ = __mul__

    def __neg__(self):
        return affine(self, -1.0, 0.0)

    def __matmul__(self, other):
        return matmul(self, _as_var(other))


def _as_var(x, shape=None) -> Variable:
    if isinstance(x, Variable):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None and arr.shape != tuple(shape):
        arr = np.broadcast_to(arr, shape).copy()
    return Variable(arr)


def constant(x) -> Variable:
    return Variable(x)


# ---------------------------------------------------------------------------
# primitive machinery
# ---------------------------------------------------------------------------

class Op:
    __slots__ = ("name", "forward", "backward")

    def __init__(self, name: str, forward: Callable, backward: Callable):
        self.name = name
        self.forward = forward
        self.backward = backward


def _apply(op: Op, inputs: Sequence[Variable], **meta) -> Variable:
    value = op.forward(*[v.value for v in inputs], **meta)
    out = Variable(value)
    if not _state.recording or not any(v.requires_grad for v in inputs):
        return out
    graph = None
    for v in inputs:
        g = v.graph
        if g is not None:
            if graph is not None and g is not graph:
                raise ValueError("operands belong to different graphs")
            graph = g
    if graph is None:
        graph = current_graph()
    node = graph._append(op, tuple(inputs), meta)
    node._out = weakref.ref(out)
    out.node = node
    out.requires_grad = True
    return out


def _check_same(name, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _check_ndim(name, x, ndim):
    if x.ndim != ndim:
        raise ShapeError(f"{name}: expected {ndim}-d input, got shape {x.shape}")


# Each backward rule gets (node, out, g, need) and returns one gradient (or
# None) per input.  Rules may only call the public primitives below.

def _bw_add(node, out, g, need):
    return [g, g]


def _bw_sub(node, out, g, need):
    return [g, affine(g, -1.0, 0.0) if need[1] else None]


def _bw_mul(node, out, g, need):
    a, b = node.inputs
    return [mul(g, b) if need[0] else None, mul(g, a) if need[1] else None]


def _bw_affine(node, out, g, need):
    return [affine(g, node.meta["scale"], 0.0)]


def _bw_exp(node, out, g, need):
    return [mul(g, out)]


def _bw_square(node, out, g, need):
    (x,) = node.inputs
    return [mul(g, affine(x, 2.0, 0.0))]


def _bw_ssp(node, out, g, need):
    (x,) = node.inputs
    return [mul(g, sigmoid(x))]


def _bw_sigmoid(node, out, g, need):
    # s' = s (1 - s)
    return [mul(g, mul(out, affine(out, -1.0, 1.0)))]


def _bw_reciprocal(node, out, g, need):
    return [mul(g, affine(square(out), -1.0, 0.0))]


def _bw_matmul(node, out, g, need):
    a, b = node.inputs
    ga = matmul(g, transpose(b)) if need[0] else None
    gb = matmul(transpose(a), g) if need[1] else None
    return [ga, gb]


def _bw_transpose(node, out, g, need):
    return [transpose(g)]


def _bw_add_rows(node, out, g, need):
    return [g if need[0] else None, sum_rows(g) if need[1] else None]


def _bw_sum_rows(node, out, g, need):
    return [broadcast_rows(g, node.inputs[0].shape[0])]


def _bw_broadcast_rows(node, out, g, need):
    return [sum_rows(g)]


def _bw_sum_cols(node, out, g, need):
    return [broadcast_cols(g, node.inputs[0].shape[1])]


def _bw_broadcast_cols(node, out, g, need):
    return [sum_cols(g)]


def _bw_sum_all(node, out, g, need):
    return [fill(g, node.inputs[0].shape)]


def _bw_fill(node, out, g, need):
    return [sum_all(g)]


def _bw_segment_sum(node, out, g, need):
    return [gather_rows(g, node.meta["segments"])]


def _bw_gather_rows(node, out, g, need):
    return [segment_sum(g, node.meta["index"], node.inputs[0].shape[0])]


def _bw_concat_rows(node, out, g, need):
    grads, start = [], 0
    for v, want in zip(node.inputs, need):
        stop = start + v.shape[0]
        grads.append(gather_rows(g, np.arange(start, stop)) if want else None)
        start = stop
    return grads


def _bw_l2_norm_rows(node, out, g, need):
    (x,) = node.inputs
    scale = mul(g, reciprocal(out))
    return [mul(x, broadcast_cols(scale, x.shape[1]))]


def _fw_ssp(x):
    # ln(0.5 e^x + 0.5) = ln(1 + expm1(x)/2)          for x <= 0
    #                   = x + ln(1 + expm1(-x)/2)     for x > 0 (no overflow)
    neg = np.minimum(x, 0.0)
    pos = np.maximum(x, 0.0)
    return np.where(x > 0, pos + np.log1p(np.expm1(-pos) / 2), np.log1p(np.expm1(neg) / 2))


def _fw_sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _fw_reciprocal(x):
    out = np.zeros_like(x)
    np.divide(1.0, x, out=out, where=x != 0)
    return out


def _fw_segment_sum(x, segments, n_segments):
    out = np.zeros((n_segments,) + x.shape[1:])
    np.add.at(out, segments, x)
    return out


def _fw_l2_norm_rows(x):
    return np.sqrt(np.einsum("ij,ij->i", x, x))


_ADD = Op("add", lambda a, b: a + b, _bw_add)
_SUB = Op("sub", lambda a, b: a - b, _bw_sub)
_MUL = Op("mul", lambda a, b: a * b, _bw_mul)
_AFFINE = Op("affine", lambda x, scale, shift: x * scale + shift, _bw_affine)
_EXP = Op("exp", np.exp, _bw_exp)
_SQUARE = Op("square", np.square, _bw_square)
_SSP = Op("ssp", _fw_ssp, _bw_ssp)
_SIGMOID = Op("sigmoid", _fw_sigmoid, _bw_sigmoid)
_RECIPROCAL = Op("reciprocal", _fw_reciprocal, _bw_reciprocal)
_MATMUL = Op("matmul", np.matmul, _bw_matmul)
_TRANSPOSE = Op("transpose", lambda x: np.ascontiguousarray(x.T), _bw_transpose)
_ADD_ROWS = Op("add_rows", lambda x, b: x + b, _bw_add_rows)
_SUM_ROWS = Op("sum_rows", lambda x: x.sum(axis=0), _bw_sum_rows)
_BROADCAST_ROWS = Op("broadcast_rows", lambda b, n: np.tile(b, (n, 1)), _bw_broadcast_rows)
_SUM_COLS = Op("sum_cols", lambda x: x.sum(axis=1), _bw_sum_cols)
_BROADCAST_COLS = Op("broadcast_cols", lambda s, d: np.repeat(s[:, None], d, axis=1),
                     _bw_broadcast_cols)
_SUM_ALL = Op("sum_all", lambda x: np.asarray(x.sum()), _bw_sum_all)
_FILL = Op("fill", lambda s, shape: np.full(shape, float(s)), _bw_fill)
_SEGMENT_SUM = Op("segment_sum", _fw_segment_sum, _bw_segment_sum)
_GATHER_ROWS = Op("gather_rows", lambda x, index: x[index], _bw_gather_rows)
_CONCAT_ROWS = Op("concat_rows", lambda *xs: np.concatenate(xs, axis=0), _bw_concat_rows)
_L2_NORM_ROWS = Op("l2_norm_rows", _fw_l2_norm_rows, _bw_l2_norm_rows)


# ---------------------------------------------------------------------------
# public primitives
# ---------------------------------------------------------------------------

def add(a: Variable, b: Variable) -> Variable:
    _check_same("add", a, b)
    return _apply(_ADD, (a, b))


def sub(a: Variable, b: Variable) -> Variable:
    _check_same("sub", a, b)
    return _apply(_SUB, (a, b))


def mul(a: Variable, b: Variable) -> Variable:
    """Element-wise product of two same-shape variables."""
    _check_same("mul", a, b)
    return _apply(_MUL, (a, b))


def affine(x: Variable, scale: float, shift: float = 0.0) -> Variable:
    """``scale * x + shift`` with constant scalars."""
    return _apply(_AFFINE, (x,), scale=float(scale), shift=float(shift))


def exp(x: Variable) -> Variable:
    return _apply(_EXP, (x,))


def square(x: Variable) -> Variable:
    return _apply(_SQUARE, (x,))


def ssp(x: Variable) -> Variable:
    """Shifted softplus, ``ln(0.5 e^x + 0.5)``; ssp(0) == 0."""
    return _apply(_SSP, (x,))


def sigmoid(x: Variable) -> Variable:
    return _apply(_SIGMOID, (x,))


def reciprocal(x: Variable) -> Variable:
    """Element-wise ``1/x``, defined as 0 where ``x == 0``."""
    return _apply(_RECIPROCAL, (x,))


def matmul(a: Variable, b: Variable) -> Variable:
    _check_ndim("matmul", a, 2)
    _check_ndim("matmul", b, 2)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    return _apply(_MATMUL, (a, b))


def transpose(x: Variable) -> Variable:
    _check_ndim("transpose", x, 2)
    return _apply(_TRANSPOSE, (x,))


def add_rows(x: Variable, b: Variable) -> Variable:
    """Add the vector ``b[d]`` to every row of ``x[n, d]``."""
    _check_ndim("add_rows", x, 2)
    if b.shape != (x.shape[1],):
        raise ShapeError(f"add_rows: shape mismatch {x.shape} vs {b.shape}")
    return _apply(_ADD_ROWS, (x, b))


def sum_rows(x: Variable) -> Variable:
    """Sum over axis 0 of a 2-d variable."""
    _check_ndim("sum_rows", x, 2)
    return _apply(_SUM_ROWS, (x,))


def broadcast_rows(b: Variable, n: int) -> Variable:
    """Stack ``n`` copies of the vector ``b`` into an ``n x d`` matrix."""
    _check_ndim("broadcast_rows", b, 1)
    return _apply(_BROADCAST_ROWS, (b,), n=int(n))


def sum_cols(x: Variable) -> Variable:
    """Sum over axis 1 of a 2-d variable."""
    _check_ndim("sum_cols", x, 2)
    return _apply(_SUM_COLS, (x,))


def broadcast_cols(s: Variable, d: int) -> Variable:
    """Repeat the vector ``s[n]`` across ``d`` columns."""
    _check_ndim("broadcast_cols", s, 1)
    return _apply(_BROADCAST_COLS, (s,), d=int(d))


def sum_all(x: Variable) -> Variable:
    return _apply(_SUM_ALL, (x,))


def fill(s: Variable, shape) -> Variable:
    """Broadcast a scalar variable to ``shape``."""
    if s.value.size != 1:
        raise ShapeError(f"fill: expected a scalar, got shape {s.shape}")
    return _apply(_FILL, (s,), shape=tuple(shape))


def segment_sum(x: Variable, segments, n_segments: int) -> Variable:
    """Sum rows of ``x`` that share a segment id: ``out[s] = sum(x[segments == s])``."""
    segments = np.asarray(segments, dtype=np.intp)
    if x.value.ndim == 0 or segments.shape != (x.shape[0],):
        raise ShapeError(f"segment_sum: {segments.shape[0] if segments.ndim else 0} "
                         f"segment ids for values of shape {x.shape}")
    if segments.size and (segments.min() < 0 or segments.max() >= n_segments):
        raise IndexError(f"segment_sum: segment id out of range [0, {n_segments})")
    return _apply(_SEGMENT_SUM, (x,), segments=segments, n_segments=int(n_segments))


def gather_rows(x: Variable, index) -> Variable:
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 1:
        raise ShapeError(f"gather_rows: index must be 1-d, got shape {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {x.shape[0]} rows")
    return _apply(_GATHER_ROWS, (x,), index=index)


def concat_rows(xs: Sequence[Variable]) -> Variable:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat_rows: nothing to concatenate")
    tail = xs[0].shape[1:]
    for v in xs[1:]:
        if v.shape[1:] != tail:
            raise ShapeError(f"concat_rows: shape mismatch {xs[0].shape} vs {v.shape}")
    return _apply(_CONCAT_ROWS, xs)


def l2_norm_rows(x: Variable) -> Variable:
    """Euclidean norm of each row.  The gradient at a zero row is taken as 0."""
    _check_ndim("l2_norm_rows", x, 2)
    return _apply(_L2_NORM_ROWS, (x,))


def linear(x: Variable, weight: Variable, bias: Variable) -> Variable:
    """Dense layer ``x @ weight + bias`` applied row-wise."""
    if x.value.ndim != 2 or weight.value.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not conform to weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: weight {weight.shape} does not conform to bias {bias.shape}")
    return add_rows(matmul(x, weight), bias)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

class GradientMap:
    """Gradients keyed by the identity of the variables they belong to."""

    def __init__(self):
        self._items: dict[int, tuple[Variable, Variable]] = {}
        self.unreachable: list[Variable] = []

    def _set(self, var: Variable, grad: Variable):
        self._items[id(var)] = (var, grad)

    def __getitem__(self, var: Variable) -> Variable:
        return self._items[id(var)][1]

    def __contains__(self, var) -> bool:
        return id(var) in self._items

    def __len__(self):
        return len(self._items)

    def items(self):
        return list(self._items.values())


def backward(loss: Variable, wrt: Iterable[Variable], create_graph: bool = False) -> GradientMap:
    """Gradients of the scalar ``loss`` with respect to each of ``wrt``.

    With ``create_graph=True`` the backward computation is recorded, so the
    returned gradients can be passed to ``backward`` again.  Variables that
    ``loss`` does not depend on get a zero gradient, a warning, and are
    listed in ``GradientMap.unreachable``.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    wrt = list(wrt)
    result = GradientMap()
    graph = loss.graph

    leaf_ids = {id(v) for v in wrt if v.is_leaf and v.requires_grad}
    nodes = graph.nodes[: loss.node.index + 1] if graph is not None else []
    # forward sweep: which nodes depend on any requested variable
    needed = bytearray(len(nodes))
    for v in wrt:
        if not v.is_leaf and v.graph is graph and v.node.index < len(nodes):
            needed[v.node.index] = 1
    for node in nodes:
        if needed[node.index]:
            continue
        for inp in node.inputs:
            if (inp.node is None and id(inp) in leaf_ids) or (
                    inp.node is not None and inp.node.graph is not None
                    and inp.node.graph() is graph and needed[inp.node.index]):
                needed[node.index] = 1
                break

    node_grads: dict[int, Variable] = {}
    leaf_grads: dict[int, Variable] = {}
    if nodes and needed[loss.node.index]:
        node_grads[loss.node.index] = Variable(np.ones_like(loss.value))

    prev = _state.recording
    _state.recording = create_graph
    try:
        for node in reversed(nodes):
            g = node_grads.pop(node.index, None)
            if g is None:
                continue
            for v in wrt:
                if v.node is node:
                    _accumulate(leaf_grads, id(v), g)
            need = [
                (inp.node is None and id(inp) in leaf_ids)
                or (inp.node is not None and inp.node.graph is not None
                    and inp.node.graph() is graph and bool(needed[inp.node.index]))
                for inp in node.inputs
            ]
            if not any(need):
                continue
            grads = node.op.backward(node, node.output, g, need)
            for inp, want, gi in zip(node.inputs, need, grads):
                if not want or gi is None:
                    continue
                if inp.node is None:
                    _accumulate(leaf_grads, id(inp), gi)
                else:
                    _accumulate(node_grads, inp.node.index, gi)
    finally:
        _state.recording = prev

    for v in wrt:
        if v is loss:
            grad = Variable(np.ones_like(v.value))
        else:
            grad = leaf_grads.get(id(v))
        if grad is None:
            grad = Variable(np.zeros_like(v.value))
            result.unreachable.append(v)
        result._set(v, grad)
    if result.unreachable:
        names = ", ".join(v.name or repr(v) for v in result.unreachable)
        warnings.warn(f"loss does not depend on: {names}; zero gradient returned",
                      UnreachableGradientWarning, stacklevel=2)
    return result


def _accumulate(store: dict, key, grad: Variable):
    prev = store.get(key)
    store[key] = grad if prev is None else add(prev, grad)


def grad(loss: Variable, wrt: Sequence[Variable], create_graph: bool = False) -> list[Variable]:
    """List-returning convenience wrapper around ``backward``."""
    gm = backward(loss, wrt, create_graph=create_graph)
    return [gm[v] for v in wrt]
