"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Graph` records every operation applied to its tensors in execution
order, so the node list is topologically sorted by construction. Calling
:func:`backward` walks the list in reverse and accumulates gradients into the
trainable leaves.

Every primitive also accepts plain arrays. When none of its inputs is a
:class:`Tensor` the primitive evaluates eagerly and returns an ``ndarray``,
which lets physics code be written once and used both for evaluation and
inside a training graph.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "primitive_forward",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "tanh",
    "sigmoid",
    "square",
    "relu",
    "absolute",
    "power",
    "concat",
    "stack",
    "take",
    "sum",
    "mean",
    "PRIMITIVES",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with a primitive."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a forward value or a gradient."""


class Tensor:
    """A node in a :class:`Graph`: an immutable value plus how it was made."""

    __slots__ = ("value", "graph", "index", "kind", "inputs", "attrs", "trainable", "name", "requires_grad")
    # make numpy defer to our reflected operators (ndarray + Tensor -> Tensor)
    __array_ufunc__ = None

    def __init__(self, value, graph, index, kind, inputs=(), attrs=None, trainable=False, name=None):
        value.flags.writeable = False
        self.value = value
        self.graph = graph
        self.index = index
        self.kind = kind
        self.inputs = inputs
        self.attrs = attrs or {}
        self.trainable = trainable
        self.name = name
        self.requires_grad = trainable or any(x.requires_grad for x in inputs)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = self.name or self.kind
        return f"Tensor(#{self.index} {label}, shape={self.shape})"

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)


class Graph:
    """Single-owner operation tape.

    Not thread-safe; build one graph per training window and discard it after
    :func:`backward`.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def parameters(self) -> list[Tensor]:
        return [n for n in self.nodes if n.trainable]

    def leaf(self, value, trainable: bool = False, name: str | None = None) -> Tensor:
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"leaf {name or len(self.nodes)} has non-finite values")
        node = Tensor(arr, self, len(self.nodes), "leaf", trainable=trainable, name=name)
        self.nodes.append(node)
        return node

    def param(self, value, name: str | None = None) -> Tensor:
        return self.leaf(value, trainable=True, name=name)

    def constant(self, value, name: str | None = None) -> Tensor:
        return self.leaf(value, trainable=False, name=name)

    def evaluate(self, target: Tensor, overrides: dict[Tensor, np.ndarray] | None = None) -> np.ndarray:
        """Replay the forward pass up to ``target`` with some leaves replaced.

        Node values are left untouched; the replay uses a scratch list.
        """
        overrides = overrides or {}
        values: list[np.ndarray] = []
        for node in self.nodes[: target.index + 1]:
            if node.kind == "leaf":
                values.append(np.asarray(overrides.get(node, node.value), dtype=np.float64))
            else:
                fwd = PRIMITIVES[node.kind][0]
                values.append(fwd([values[i.index] for i in node.inputs], node.attrs))
        return values[target.index]


# ---------------------------------------------------------------------------
# primitive table: kind -> (forward(values, attrs), vjp(grad, values, out, attrs))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def _fwd_add(v, _):
    _broadcast_check("add", *v)
    return v[0] + v[1]


def _fwd_sub(v, _):
    _broadcast_check("sub", *v)
    return v[0] - v[1]


def _fwd_mul(v, _):
    _broadcast_check("mul", *v)
    return v[0] * v[1]


def _fwd_div(v, _):
    _broadcast_check("div", *v)
    return v[0] / v[1]


def _fwd_matmul(v, _):
    a, b = v
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def _vjp_matmul(g, v, out, _):
    a, b = v
    ga = g @ b.T
    a2 = a.reshape(-1, a.shape[-1])
    gb = a2.T @ g.reshape(-1, b.shape[1])
    return ga, gb


def _fwd_transpose(v, _):
    if v[0].ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {v[0].shape}")
    return v[0].T.copy()


def _sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _fwd_concat(v, attrs):
    axis = attrs["axis"]
    try:
        return np.concatenate(v, axis=axis)
    except ValueError:
        shapes = " and ".join(str(x.shape) for x in v)
        raise ShapeError(f"concat(axis={axis}): incompatible shapes {shapes}") from None


def _vjp_concat(g, v, out, attrs):
    axis = attrs["axis"]
    cuts = np.cumsum([x.shape[axis] for x in v])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _fwd_stack(v, attrs):
    try:
        return np.stack(v, axis=attrs["axis"])
    except ValueError:
        shapes = " and ".join(str(x.shape) for x in v)
        raise ShapeError(f"stack: incompatible shapes {shapes}") from None


def _vjp_stack(g, v, out, attrs):
    axis = attrs["axis"]
    return tuple(np.take(g, i, axis=axis) for i in range(len(v)))


def _fwd_take(v, attrs):
    try:
        return np.array(v[0][attrs["index"]], dtype=np.float64)
    except IndexError as exc:
        raise ShapeError(f"take: index {attrs['index']!r} invalid for shape {v[0].shape}") from exc


def _vjp_take(g, v, out, attrs):
    full = np.zeros_like(v[0])
    full[attrs["index"]] = g
    return (full,)


def _fwd_sum(v, attrs):
    return np.asarray(np.sum(v[0], axis=attrs["axis"]), dtype=np.float64)


def _expand_reduced(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else axis
    axes = tuple(a % len(shape) for a in axes)
    return np.broadcast_to(np.expand_dims(g, axes), shape)


def _reduced_count(shape, axis):
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if isinstance(axis, int) else axis
    return int(np.prod([shape[a] for a in axes]))


def _fwd_mean(v, attrs):
    if v[0].size == 0:
        raise ShapeError("mean: empty input")
    return np.asarray(np.mean(v[0], axis=attrs["axis"]), dtype=np.float64)


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "add": (_fwd_add, lambda g, v, o, a: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape))),
    "sub": (_fwd_sub, lambda g, v, o, a: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape))),
    "mul": (
        _fwd_mul,
        lambda g, v, o, a: (_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)),
    ),
    "div": (
        _fwd_div,
        lambda g, v, o, a: (_unbroadcast(g / v[1], v[0].shape), _unbroadcast(-g * o / v[1], v[1].shape)),
    ),
    "neg": (lambda v, a: -v[0], lambda g, v, o, a: (-g,)),
    "matmul": (_fwd_matmul, _vjp_matmul),
    "transpose": (_fwd_transpose, lambda g, v, o, a: (g.T,)),
    "tanh": (lambda v, a: np.tanh(v[0]), lambda g, v, o, a: (g * (1.0 - o * o),)),
    "sigmoid": (lambda v, a: _sigmoid(v[0]), lambda g, v, o, a: (g * o * (1.0 - o),)),
    "square": (lambda v, a: v[0] * v[0], lambda g, v, o, a: (2.0 * g * v[0],)),
    # subgradient at exactly 0 is 0
    "relu": (lambda v, a: np.maximum(v[0], 0.0), lambda g, v, o, a: (g * (v[0] > 0.0),)),
    "abs": (lambda v, a: np.abs(v[0]), lambda g, v, o, a: (g * np.sign(v[0]),)),
    "power": (
        lambda v, a: v[0] ** a["exponent"],
        lambda g, v, o, a: (g * a["exponent"] * v[0] ** (a["exponent"] - 1.0),),
    ),
    "concat": (_fwd_concat, _vjp_concat),
    "stack": (_fwd_stack, _vjp_stack),
    "take": (_fwd_take, _vjp_take),
    "sum": (_fwd_sum, lambda g, v, o, a: (_expand_reduced(g, v[0].shape, a["axis"]),)),
    "mean": (
        _fwd_mean,
        lambda g, v, o, a: (_expand_reduced(g, v[0].shape, a["axis"]) / _reduced_count(v[0].shape, a["axis"]),),
    ),
}


def primitive_forward(kind: str, inputs: Sequence, **attrs):
    """Apply primitive ``kind`` to ``inputs``.

    If any input is a :class:`Tensor` the result is a new node on that
    tensor's graph; array-like inputs are lifted to constants. Otherwise the
    primitive is evaluated eagerly on ``ndarray`` values.
    """
    fwd = PRIMITIVES[kind][0]
    graph = None
    for x in inputs:
        if isinstance(x, Tensor):
            if graph is None:
                graph = x.graph
            elif x.graph is not graph:
                raise ValueError(f"{kind}: operands belong to different graphs")
    if graph is None:
        return fwd([np.asarray(x, dtype=np.float64) for x in inputs], attrs)
    nodes = tuple(x if isinstance(x, Tensor) else graph.constant(x) for x in inputs)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        # overflow is reported below as NonFiniteError instead
        out = fwd([n.value for n in nodes], attrs)
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"node #{len(graph.nodes)} ({kind}) produced non-finite values")
    node = Tensor(out, graph, len(graph.nodes), kind, nodes, attrs)
    graph.nodes.append(node)
    return node


def add(a, b):
    return primitive_forward("add", (a, b))


def sub(a, b):
    return primitive_forward("sub", (a, b))


def mul(a, b):
    return primitive_forward("mul", (a, b))


def div(a, b):
    return primitive_forward("div", (a, b))


def neg(a):
    return primitive_forward("neg", (a,))


def matmul(a, b):
    """``a @ b`` with ``b`` a matrix and ``a`` of any rank >= 1."""
    return primitive_forward("matmul", (a, b))


def transpose(a):
    return primitive_forward("transpose", (a,))


def tanh(a):
    return primitive_forward("tanh", (a,))


def sigmoid(a):
    return primitive_forward("sigmoid", (a,))


def square(a):
    return primitive_forward("square", (a,))


def relu(a):
    """Positive part ``max(0, a)``."""
    return primitive_forward("relu", (a,))


def absolute(a):
    return primitive_forward("abs", (a,))


def power(a, exponent: float):
    return primitive_forward("power", (a,), exponent=float(exponent))


def concat(tensors: Sequence, axis: int = -1):
    return primitive_forward("concat", tuple(tensors), axis=axis)


def stack(tensors: Sequence, axis: int = 0):
    return primitive_forward("stack", tuple(tensors), axis=axis)


def take(a, index):
    """Basic (slice/integer) indexing. Fancy indexing is not supported."""
    idx = index if isinstance(index, tuple) else (index,)
    for part in idx:
        if not (part is Ellipsis or part is None or isinstance(part, (slice, int, np.integer))):
            raise TypeError(f"take: only basic indexing is supported, got {type(part).__name__}")
    return primitive_forward("take", (a,), index=index)


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    return primitive_forward("sum", (a,), axis=axis)


def mean(a, axis=None):
    return primitive_forward("mean", (a,), axis=axis)


def _accumulate(graph: Graph, loss: Tensor, checked: bool) -> dict[int, np.ndarray]:
    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    owned: set[int] = set()  # accumulators allocated here, safe to update in place
    for node in reversed(graph.nodes[: loss.index + 1]):
        g = grads.get(node.index)
        if g is None or node.kind == "leaf" or not node.requires_grad:
            continue
        if node.kind == "take":
            # scatter straight into the accumulator instead of densifying each slice
            x = node.inputs[0]
            acc = grads.get(x.index)
            if x.index not in owned:
                acc = np.zeros_like(x.value) if acc is None else np.array(acc, dtype=np.float64)
                grads[x.index] = acc
                owned.add(x.index)
            acc[node.attrs["index"]] += g
            in_grads = ()
        else:
            vjp = PRIMITIVES[node.kind][1]
            with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                in_grads = vjp(g, [x.value for x in node.inputs], node.value, node.attrs)
        for x, gx in zip(node.inputs, in_grads):
            if not x.requires_grad:
                continue
            prev = grads.get(x.index)
            if prev is None:
                grads[x.index] = gx
            elif x.index in owned:
                prev += gx
            else:
                grads[x.index] = prev + gx
                owned.add(x.index)
        if checked and not all(np.all(np.isfinite(grads[x.index])) for x in node.inputs if x.requires_grad):
            raise NonFiniteError(f"gradient through node #{node.index} ({node.kind}) is non-finite")
    return grads


def backward(graph: Graph, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to every trainable leaf.

    Leaves used more than once accumulate (sum rule). Trainable leaves that
    do not influence ``loss`` receive zero gradients. A non-finite gradient
    raises :class:`NonFiniteError` naming the first node that produced one.
    """
    if loss.graph is not graph:
        raise ValueError("loss does not belong to this graph")
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = _accumulate(graph, loss, checked=False)
    params = [p for p in graph.parameters if p.index <= loss.index]
    if not all(np.all(np.isfinite(grads[p.index])) for p in params if p.index in grads):
        # rare path: replay with per-node checks to locate the origin
        _accumulate(graph, loss, checked=True)
    out = {}
    for p in params:
        g = grads.get(p.index)
        out[p] = np.zeros_like(p.value) if g is None else np.array(g, dtype=np.float64).reshape(p.shape)
    return out


def grad_check(graph: Graph, loss: Tensor, epsilon: float = 1e-6) -> float:
    """Largest relative error between backprop and central differences.

    The error for one trainable leaf is
    ``||analytic - numeric|| / (||numeric|| + 1e-12)``; the maximum over
    leaves is returned (0.0 when the graph has no parameters).
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ValueError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    analytic = backward(graph, loss)
    worst = 0.0
    for p, g in analytic.items():
        base = p.value
        numeric = np.zeros_like(base)
        for i in np.ndindex(base.shape):
            shifted = base.copy()
            shifted[i] = base[i] + epsilon
            f_plus = float(graph.evaluate(loss, {p: shifted}))
            shifted[i] = base[i] - epsilon
            f_minus = float(graph.evaluate(loss, {p: shifted}))
            numeric[i] = (f_plus - f_minus) / (2.0 * epsilon)
        err = np.linalg.norm(g - numeric) / (np.linalg.norm(numeric) + 1e-12)
        worst = max(worst, float(err))
    return worst
