"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Node` wraps an ``ndarray`` value together with the information
needed to push gradients back to its parents.  Graphs are recorded
define-by-run: every differentiable op returns a fresh node whose
``backward_fn`` maps the upstream gradient to one gradient per parent.
Node ids come from a global counter, so sorting reachable nodes by id
gives a valid topological order without an explicit tape object.
"""
from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

DTYPES = {
    "f32": np.dtype(np.float32),
    "f64": np.dtype(np.float64),
    "u8": np.dtype(np.uint8),
    "i64": np.dtype(np.int64),
}

_ids = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (eval / finite differences)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """One value in a recorded computation.

    Leaves have no parents; their ``grad`` slot is filled by :func:`backward`.
    Intermediate nodes drop their parent links once a backward sweep has
    passed through them, which frees the graph.
    """

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "id", "op")
    __array_priority__ = 100

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Node(op={self.op!r}, shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; the real definitions live below
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_node(x, dtype=None) -> Node:
    if isinstance(x, Node):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Node(arr)


def leaf(value, requires_grad=True) -> Node:
    return Node(np.array(value, copy=True), requires_grad=requires_grad)


def make_node(value, parents, backward_fn, op) -> Node:
    """Record ``value`` as the result of ``op`` if any parent needs a gradient."""
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Node(value, True, parents, backward_fn, op)
    return Node(value, op=op)


def _topo_order(root: Node) -> list[Node]:
    seen = set()
    order = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in seen or not node.requires_grad:
            continue
        seen.add(node.id)
        order.append(node)
        stack.extend(node.parents)
    order.sort(key=lambda n: n.id, reverse=True)
    return order


def backward(root: Node) -> None:
    """Populate ``grad`` on every leaf that ``root`` depends on.

    Gradients for nodes reached along several paths are summed.  The
    recorded graph below ``root`` is released afterwards.
    """
    if root.value.ndim != 0:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    pending = {root.id: np.ones_like(root.value)}
    for node in order:
        g = pending.pop(node.id, None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in pending:
                pending[parent.id] = pending[parent.id] + pg
            else:
                pending[parent.id] = pg
    for node in order:
        if node.parents:
            node.parents = ()
            node.backward_fn = None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    ndiff = g.ndim - len(shape)
    if ndiff:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a, b):
    a = as_node(a)
    b = as_node(b)
    # python scalars must not upcast f32 arrays
    if a.value.ndim == 0 and not a.requires_grad and b.value.dtype.kind == "f":
        a = Node(a.value.astype(b.value.dtype))
    if b.value.ndim == 0 and not b.requires_grad and a.value.dtype.kind == "f":
        b = Node(b.value.astype(a.value.dtype))
    return a, b


def add(a, b) -> Node:
    a, b = _binary(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.value + b.value, (a, b), bw, "add")


def sub(a, b) -> Node:
    a, b = _binary(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.value - b.value, (a, b), bw, "sub")


def mul(a, b) -> Node:
    a, b = _binary(a, b)

    def bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return make_node(a.value * b.value, (a, b), bw, "mul")


def div(a, b) -> Node:
    a, b = _binary(a, b)
    out = a.value / b.value

    def bw(g):
        ga = _unbroadcast(g / b.value, a.shape)
        gb = _unbroadcast(-g * out / b.value, b.shape)
        return ga, gb

    return make_node(out, (a, b), bw, "div")


def neg(a) -> Node:
    a = as_node(a)
    return make_node(-a.value, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Node:
    a = as_node(a)
    out = a.value ** exponent

    def bw(g):
        return (g * exponent * a.value ** (exponent - 1),)

    return make_node(out, (a,), bw, "pow")


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Node:
    a = as_node(a)
    return make_node(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def sqrt(a) -> Node:
    a = as_node(a)
    out = np.sqrt(a.value)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    axes = _normalize_axis(axis, a.ndim)
    out = a.value.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    axes = _normalize_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.value.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_node(out, (a,), bw, "mean")


def amax(a, axis, keepdims=False) -> Node:
    """Max reduction; ties send the gradient to the first maximal entry."""
    a = as_node(a)
    axes = _normalize_axis(axis, a.ndim)
    out = a.value.max(axis=axes, keepdims=True)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        hit = a.value == out
        # keep the first hit only along the reduced axes
        moved = np.moveaxis(hit, axes, tuple(range(-len(axes), 0)))
        flat = moved.reshape(moved.shape[: moved.ndim - len(axes)] + (-1,))
        first = np.zeros_like(flat)
        np.put_along_axis(first, flat.argmax(axis=-1)[..., None], True, axis=-1)
        first = np.moveaxis(first.reshape(moved.shape), tuple(range(-len(axes), 0)), axes)
        return (np.where(first, g, 0).astype(a.dtype),)

    value = out if keepdims else np.squeeze(out, axis=axes)
    return make_node(value, (a,), bw, "amax")


def reshape(a, shape) -> Node:
    a = as_node(a)
    return make_node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Node:
    a = as_node(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    out = np.ascontiguousarray(a.value.transpose(axes))
    return make_node(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, index) -> Node:
    a = as_node(a)
    out = a.value[index]

    def bw(g):
        full = np.zeros_like(a.value)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_node(out, (a,), bw, "getitem")


def _is_advanced(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(nodes, axis=0) -> Node:
    nodes = [as_node(n) for n in nodes]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(out, tuple(nodes), bw, "concat")


def split(a, sections: int, axis=-1) -> list[Node]:
    a = as_node(a)
    size = a.shape[axis]
    if size % sections:
        raise ValueError(f"cannot split axis of size {size} into {sections} equal parts")
    step = size // sections
    axis = axis % a.ndim
    parts = []
    for k in range(sections):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(k * step, (k + 1) * step)
        parts.append(getitem(a, tuple(idx)))
    return parts


def matmul(a, b) -> Node:
    a, b = _binary(a, b)
    out = a.value @ b.value

    def bw(g):
        av, bv = a.value, b.value
        if bv.ndim == 1:
            ga = np.multiply.outer(g, bv)
            gb = (av * g[..., None]).reshape(-1, bv.shape[0]).sum(0)
            return ga, gb
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return make_node(out, (a, b), bw, "matmul")


def where(cond, a, b) -> Node:
    a, b = _binary(a, b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        zero = np.zeros((), dtype=g.dtype)
        return _unbroadcast(np.where(cond, g, zero), a.shape), _unbroadcast(np.where(cond, zero, g), b.shape)

    return make_node(np.where(cond, a.value, b.value), (a, b), bw, "where")


def finite_diff_check(fn, inputs, step=1e-5, coords=None) -> float:
    """Largest relative gap between backward() and central differences.

    ``fn`` takes one node per entry of ``inputs`` and returns a scalar node.
    ``coords`` optionally restricts the probe to ``(input_index, flat_index)``
    pairs; by default every coordinate of every input is probed.
    The error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    arrays = [np.array(x, dtype=np.float64, copy=True) for x in inputs]
    nodes = [Node(arr.copy(), requires_grad=True) for arr in arrays]
    out = fn(*nodes)
    backward(out)
    analytic = [n.grad if n.grad is not None else np.zeros_like(n.value) for n in nodes]

    if coords is None:
        coords = [(i, j) for i, arr in enumerate(arrays) for j in range(arr.size)]

    def evaluate():
        with no_grad():
            return float(fn(*[Node(a) for a in arrays]).value)

    worst = 0.0
    for i, j in coords:
        flat = arrays[i].reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        f_plus = evaluate()
        flat[j] = orig - step
        f_minus = evaluate()
        flat[j] = orig
        numeric = (f_plus - f_minus) / (2 * step)
        a = float(analytic[i].reshape(-1)[j])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
