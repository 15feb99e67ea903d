"""Eager reverse-mode automatic differentiation over dense float64 arrays.

Every vector-Jacobian product is itself written with differentiable
primitives, so ``grad(..., create_graph=True)`` returns nodes that can be
differentiated again.  This is what the chaser meta-gradient needs: the
SVGD update contains a gradient, and the meta-loss is differentiated
through it.

ReLU uses a subgradient of 0 at exactly 0.
"""

from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

__all__ = [
    "Node",
    "Tape",
    "ShapeError",
    "GradientError",
    "constant",
    "variable",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "grad",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "square",
    "exp",
    "log",
    "sum",
    "mean",
    "max",
    "logsumexp",
    "gather",
    "index",
    "concat",
    "stack",
    "reshape",
    "transpose",
    "broadcast_to",
    "sum_to",
]

_state = threading.local()
_ids = itertools.count()


class ShapeError(ValueError):
    pass


class GradientError(FloatingPointError):
    pass


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def _grad_mode(flag: bool):
    prev = is_grad_enabled()
    _state.enabled = flag
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager: operations inside record no graph."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Node:
    """A value in the computation graph.

    ``vjp`` maps the upstream gradient (a Node) to one gradient Node (or
    None) per parent.
    """

    __slots__ = ("value", "parents", "op", "vjp", "requires_grad", "grad", "id", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, value, parents=(), op="leaf", vjp=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.op = op
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.grad = None
        self.id = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Node":
        return Node(self.value)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


def constant(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def variable(x) -> Node:
    """A leaf that gradients are taken with respect to."""
    value = x.value if isinstance(x, Node) else x
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def _make(value, parents, op, vjp) -> Node:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Node(value, parents, op, vjp, True)
    return Node(value, (), op)


def _shape_error(op, *shapes):
    dims = " vs ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible operand shapes {dims}")


# ---------------------------------------------------------------------------
# broadcasting helpers


def broadcast_to(x, shape) -> Node:
    x = constant(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        # read-only view; no operation here ever writes into a node's value
        value = np.broadcast_to(x.value, shape)
    except ValueError:
        raise _shape_error("broadcast_to", x.shape, shape) from None
    src = x.shape
    return _make(value, (x,), "broadcast_to", lambda g: (sum_to(g, src),))


def _reduce_to(value: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    lead = value.ndim - len(shape)
    if lead:
        value = value.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and value.shape[i] != 1)
    if axes:
        value = value.sum(axis=axes, keepdims=True)
    return value.reshape(shape)


def sum_to(x, shape) -> Node:
    """Sum a broadcast array back down to ``shape`` (adjoint of broadcast_to)."""
    x = constant(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    return _make(_reduce_to(x.value, shape), (x,), "sum_to", lambda g: (broadcast_to(g, src),))


def _binary_shape(op, a: Node, b: Node):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Node:
    a, b = constant(a), constant(b)
    _binary_shape("add", a, b)

    def vjp(g):
        return sum_to(g, a.shape), sum_to(g, b.shape)

    return _make(a.value + b.value, (a, b), "add", vjp)


def sub(a, b) -> Node:
    a, b = constant(a), constant(b)
    _binary_shape("sub", a, b)

    def vjp(g):
        return sum_to(g, a.shape), sum_to(neg(g), b.shape)

    return _make(a.value - b.value, (a, b), "sub", vjp)


def mul(a, b) -> Node:
    a, b = constant(a), constant(b)
    _binary_shape("mul", a, b)

    def vjp(g):
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.value * b.value, (a, b), "mul", vjp)


def div(a, b) -> Node:
    a, b = constant(a), constant(b)
    _binary_shape("div", a, b)

    def vjp(g):
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.value / b.value, (a, b), "div", vjp)


def neg(a) -> Node:
    a = constant(a)
    return _make(-a.value, (a,), "neg", lambda g: (neg(g),))


def square(a) -> Node:
    a = constant(a)
    return _make(a.value * a.value, (a,), "square", lambda g: (mul(g, mul(a, 2.0)),))


def relu(a) -> Node:
    a = constant(a)
    mask = (a.value > 0).astype(np.float64)
    return _make(a.value * mask, (a,), "relu", lambda g: (mul(g, mask),))


def exp(a) -> Node:
    a = constant(a)
    out_value = np.exp(a.value)

    def vjp(g):
        # recompute so the backward graph references the input, not the output
        return (mul(g, exp(a)),)

    return _make(out_value, (a,), "exp", vjp)


def log(a) -> Node:
    a = constant(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.value)
    return _make(value, (a,), "log", lambda g: (div(g, a),))


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def transpose(a) -> Node:
    a = constant(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-d operand, got shape {a.shape}")
    return _make(a.value.T, (a,), "transpose", lambda g: (transpose(g),))


def matmul(a, b) -> Node:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)

    def vjp(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _make(a.value @ b.value, (a, b), "matmul", vjp)


def reshape(a, shape) -> Node:
    a = constant(a)
    src = a.shape
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", src, shape) from None
    return _make(value, (a,), "reshape", lambda g: (reshape(g, src),))


def index(a, key) -> Node:
    """Basic/advanced indexing; the adjoint scatters-adds into zeros."""
    a = constant(a)
    try:
        value = a.value[key]
    except IndexError as exc:
        raise ShapeError(f"index: {exc} for operand shape {a.shape}") from None
    src = a.shape
    return _make(value, (a,), "index", lambda g: (_index_add(g, key, src),))


def _index_add(g, key, shape) -> Node:
    g = constant(g)
    out = np.zeros(shape)
    np.add.at(out, key, g.value)
    return _make(out, (g,), "index_add", lambda h: (index(h, key),))


def gather(a, idx) -> Node:
    """Pick ``a[b, idx[b]]`` for each row b of a 2-d operand."""
    a = constant(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise _shape_error("gather", a.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise ShapeError(f"gather: index out of range for {a.shape[1]} columns")
    return index(a, (np.arange(a.shape[0]), idx))


def concat(nodes, axis=0) -> Node:
    nodes = [constant(n) for n in nodes]
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise _shape_error("concat", *(n.shape for n in nodes)) from None
    bounds = np.cumsum([0] + [n.shape[axis] for n in nodes])
    ndim = value.ndim
    ax = axis % ndim

    def vjp(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            key = tuple(slice(lo, hi) if i == ax else slice(None) for i in range(ndim))
            out.append(index(g, key))
        return tuple(out)

    return _make(value, tuple(nodes), "concat", vjp)


def stack(nodes, axis=0) -> Node:
    nodes = [constant(n) for n in nodes]
    expanded = []
    for n in nodes:
        shape = list(n.shape)
        shape.insert(axis % (n.ndim + 1), 1)
        expanded.append(reshape(n, tuple(shape)))
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# reductions


def _keep_shape(shape, axis):
    if axis is None:
        return tuple(1 for _ in shape)
    axes = (axis,) if isinstance(axis, int) else axis
    axes = {a % len(shape) for a in axes}
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def sum(a, axis=None, keepdims=False) -> Node:  # noqa: A001
    a = constant(a)
    src = a.shape
    kshape = _keep_shape(src, axis)
    value = a.value.sum(axis=axis, keepdims=keepdims)
    return _make(value, (a,), "sum", lambda g: (broadcast_to(reshape(g, kshape), src),))


def mean(a, axis=None, keepdims=False) -> Node:
    a = constant(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def max(a, axis=None, keepdims=False) -> Node:  # noqa: A001
    """Maximum; the gradient goes to the first maximizing entry."""
    a = constant(a)
    src = a.shape
    kshape = _keep_shape(src, axis)
    value = a.value.max(axis=axis, keepdims=keepdims)
    if axis is None:
        mask = np.zeros(a.size)
        mask[np.argmax(a.value)] = 1.0
        mask = mask.reshape(src)
    else:
        am = np.expand_dims(np.argmax(a.value, axis=axis), axis)
        mask = np.zeros(src)
        np.put_along_axis(mask, am, 1.0, axis=axis)
    return _make(value, (a,), "max", lambda g: (mul(broadcast_to(reshape(g, kshape), src), mask),))


def logsumexp(a, axis=None, keepdims=False) -> Node:
    a = constant(a)
    src = a.shape
    kshape = _keep_shape(src, axis)
    m = a.value.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    lse = np.log(np.exp(a.value - m).sum(axis=axis, keepdims=True)) + m
    if keepdims:
        value = lse
    elif axis is None:
        value = lse.reshape(())
    else:
        value = np.squeeze(lse, axis=axis)

    def vjp(g):
        out = logsumexp(a, axis=axis, keepdims=True)
        soft = exp(sub(a, broadcast_to(out, src)))
        return (mul(broadcast_to(reshape(g, kshape), src), soft),)

    return _make(value, (a,), "logsumexp", vjp)


# ---------------------------------------------------------------------------
# reverse pass


class Tape:
    """Topologically ordered records of one forward computation.

    Built from a root by walking parent references; ``retain_graph`` marks
    whether a reverse pass over it records its own graph.
    """

    def __init__(self, root: Node, retain_graph: bool = False):
        self.root = root
        self.retain_graph = retain_graph
        self.nodes = self._toposort(root)

    @staticmethod
    def _toposort(root: Node) -> list:
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if node.id in seen or not node.requires_grad:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in node.parents:
                if p.id not in seen and p.requires_grad:
                    stack.append((p, False))
        return order

    def __len__(self):
        return len(self.nodes)


def _run(root: Node, create_graph: bool, wanted: dict | None) -> dict:
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    tape = Tape(root, retain_graph=create_graph)
    relevant = None
    if wanted is not None:
        # only nodes downstream of a requested input carry useful gradient
        relevant = set()
        for node in tape.nodes:
            if node.id in wanted or any(p.id in relevant for p in node.parents):
                relevant.add(node.id)
    grads = {root.id: Node(np.ones_like(root.value))}
    found = {}
    with _grad_mode(create_graph):
        for node in reversed(tape.nodes):
            g = grads.pop(node.id, None)
            if g is None or (relevant is not None and node.id not in relevant):
                continue
            if wanted is None:
                if not node.parents:
                    found[node.id] = (node, g)
            elif node.id in wanted:
                found[node.id] = (node, g)
            if node.vjp is None:
                continue
            pgs = node.vjp(g)
            for pos, (p, pg) in enumerate(zip(node.parents, pgs)):
                if pg is None or not p.requires_grad:
                    continue
                if relevant is not None and p.id not in relevant:
                    continue
                if pg.shape != p.shape:
                    raise ShapeError(f"{node.op}: gradient shape {pg.shape} != operand shape {p.shape}")
                if np.isnan(np.sum(pg.value)) and np.isnan(pg.value).any():
                    raise GradientError(
                        f"NaN gradient flowing from node #{node.id} ({node.op}) "
                        f"into operand {pos} (#{p.id}, {p.op})"
                    )
                prev = grads.get(p.id)
                grads[p.id] = pg if prev is None else add(prev, pg)
    return found


def grad(root: Node, inputs, create_graph: bool = False) -> list:
    """Gradients of scalar ``root`` with respect to each node in ``inputs``.

    Inputs unreachable from the root get a zero gradient.  With
    ``create_graph`` the returned nodes are themselves differentiable.
    """
    single = isinstance(inputs, Node)
    inputs = [inputs] if single else list(inputs)
    found = _run(root, create_graph, {n.id: n for n in inputs})
    out = []
    for n in inputs:
        if n.id in found:
            out.append(found[n.id][1])
        else:
            out.append(Node(np.zeros_like(n.value)))
    return out[0] if single else out


def backward(root: Node, create_graph: bool = False) -> list:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf."""
    found = _run(root, create_graph, None)
    leaves = []
    for node, g in found.values():
        node.grad = g if node.grad is None else add(node.grad, g)
        leaves.append(node)
    return leaves
