"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

Operations executed inside an active :class:`Graph` are appended to its tape;
:func:`backward` replays the tape in reverse. Outside a graph the same
functions just compute values, which is what inference paths use.

    >>> w = Tensor([0.0], requires_grad=True)
    >>> with Graph() as g:
    ...     loss = sum_all(sigmoid(w))
    >>> float(backward(g, loss)[w][0])
    0.25
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

BCE_EPS = 1e-7

_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteGradientError(FloatingPointError):
    """Raised by the optimizer when a gradient holds NaN or inf."""


class Tensor:
    """A dense float64 array, optionally a differentiable leaf."""

    __slots__ = ("data", "requires_grad", "name", "tracked")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        # set on recorded outputs that depend on a differentiable leaf
        self.tracked = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    """One tape record: operation kind, inputs, output and local gradient rule."""

    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Computation tape. Use as a context manager to record operations."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _stack() -> list[Graph]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_graph() -> Graph | None:
    stack = _stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording (e.g. for validation passes inside a training loop)."""

    def __enter__(self):
        self._saved = list(_stack())
        _stack().clear()
        return self

    def __exit__(self, *exc):
        _stack().extend(self._saved)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t.tracked


def _record(kind: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.name = None
    out.tracked = False
    graph = active_graph()
    if graph is not None and any(_needs_grad(t) for t in inputs):
        out.tracked = True
        graph.nodes.append(Node(kind, inputs, out, grad_fn))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    return _record("shift", (a,), a.data + c, lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    ndim = tensors[0].data.ndim
    ax = axis % ndim
    for t in tensors[1:]:
        other = [d for i, d in enumerate(t.shape) if i != ax]
        first = [d for i, d in enumerate(tensors[0].shape) if i != ax]
        if t.data.ndim != ndim or other != first:
            raise ShapeError("concat", tensors[0].shape, t.shape)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record("concat", tensors, np.concatenate([t.data for t in tensors], axis=ax), grad_fn)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    """Mean over ``axis``; ``axis=None`` reduces to a shape-(1,) scalar."""
    shape = a.shape
    if axis is None:
        n = a.size

        def grad_all(g):
            return (np.full(shape, g.reshape(-1)[0] / n),)

        return _record("mean", (a,), np.array([a.data.mean()]), grad_all)
    ax = axis % a.data.ndim
    n = shape[ax]

    def grad_axis(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, shape).copy(),)

    return _record("mean", (a,), a.data.mean(axis=ax), grad_axis)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", (a,), np.array([a.data.sum()]), lambda g: (np.full(shape, g.reshape(-1)[0]),))


def reduce_sum(a: Tensor, axis: int) -> Tensor:
    shape = a.shape
    ax = axis % a.data.ndim

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _record("sum", (a,), a.data.sum(axis=ax), grad_fn)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def _logistic(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    y = _logistic(a.data)
    return _record("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (a,), y, grad_fn)


def log(a: Tensor) -> Tensor:
    x = a.data
    return _record("log", (a,), np.log(x), lambda g: (g / x,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _record("reshape", (a,), out, lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.data.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inverse),))


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Basic slicing along one axis (an int drops the axis, a slice keeps it)."""
    shape = a.shape
    sl = [slice(None)] * a.data.ndim
    sl[axis] = index
    sl = tuple(sl)

    def grad_fn(g):
        full = np.zeros(shape)
        full[sl] = g
        return (full,)

    return _record("take", (a,), a.data[sl], grad_fn)


def gather_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Select rows by integer index array (rows may repeat)."""
    rows = np.asarray(rows, dtype=np.intp)
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape)
        np.add.at(full, rows, g)
        return (full,)

    return _record("gather", (a,), a.data[rows], grad_fn)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Explicit broadcast; the backward pass sums over the broadcast axes."""
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", src, tuple(shape)) from None
    lead = len(shape) - len(src)

    def grad_fn(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        keep = tuple(i for i, d in enumerate(src) if d == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g,)

    return _record("broadcast", (a,), out, grad_fn)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` broadcast over the leading rows."""
    return add(x, broadcast_to(b, x.shape))


def lstm_cell(z: Tensor, c_prev: Tensor) -> Tensor:
    """Fused LSTM gate update.

    ``z`` holds the (batch, 4H) gate pre-activations in order i, f, g, o and
    ``c_prev`` the (batch, H) cell state. Returns ``[h, c]`` side by side as
    (batch, 2H).
    """
    B, H = c_prev.shape
    if z.shape != (B, 4 * H):
        raise ShapeError("lstm_cell", z.shape, c_prev.shape)
    zd, cp = z.data, c_prev.data
    i = _logistic(zd[:, :H])
    f = _logistic(zd[:, H:2 * H])
    gg = np.tanh(zd[:, 2 * H:3 * H])
    o = _logistic(zd[:, 3 * H:])
    c = f * cp + i * gg
    tc = np.tanh(c)
    h = o * tc

    def grad_fn(g):
        gh, gc = g[:, :H], g[:, H:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * gg * i * (1.0 - i),
            dc * cp * f * (1.0 - f),
            dc * i * (1.0 - gg * gg),
            gh * tc * o * (1.0 - o),
        ], axis=1)
        return dz, dc * f

    return _record("lstm_cell", (z, c_prev), np.concatenate([h, c], axis=1), grad_fn)


def gradient_reversal(x: Tensor, lambda_grl: float = 1.0) -> Tensor:
    """Identity forward; multiplies the upstream gradient by ``-lambda_grl``."""
    if lambda_grl < 0:
        raise ValueError("lambda_grl must be non-negative")
    c = -float(lambda_grl)
    return _record("grl", (x,), x.data.copy(), lambda g: (g * c,))


def bce(p: Tensor, y, weights=None, eps: float = BCE_EPS) -> Tensor:
    """Binary cross-entropy, averaged over samples.

    ``p`` is clamped to ``[eps, 1 - eps]`` (no gradient flows through the
    clamped entries). With ``weights`` the per-sample losses are scaled before
    the mean over the sample count.
    """
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if y.shape != p.shape:
        raise ShapeError("bce", p.shape, y.shape)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != y.shape:
        raise ShapeError("bce(weights)", y.shape, w.shape)
    raw = p.data
    pc = np.clip(raw, eps, 1.0 - eps)
    n = y.size
    losses = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    value = np.array([(w * losses).sum() / n])
    inside = (raw >= eps) & (raw <= 1.0 - eps)

    def grad_fn(g):
        local = w * (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n
        return (g.reshape(-1)[0] * local * inside,)

    return _record("bce", (p,), value, grad_fn)


# ---------------------------------------------------------------------------
# reverse pass


class GradMap:
    """Gradients keyed by tensor identity; unknown tensors read as zeros."""

    def __init__(self, grads: dict[int, np.ndarray], owners: dict[int, Tensor]):
        self._grads = grads
        self._owners = owners

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None or self._owners.get(id(t)) is not t:
            return np.zeros(t.shape)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return self._owners.get(id(t)) is t

    def __len__(self) -> int:
        return len(self._grads)


def backward(graph: Graph, loss: Tensor) -> GradMap:
    """Replay ``graph`` in reverse and return d(loss)/d(node) for every node."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(graph.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.grad_fn(g)):
            if gi is None or not _needs_grad(inp):
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64).reshape(inp.shape)
                owners[key] = inp
    return GradMap(grads, owners)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Bias-corrected Adam acting in place on a fixed list of parameters."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState(
            [np.zeros(p.shape) for p in self.params],
            [np.zeros(p.shape) for p in self.params],
            0, beta1, beta2, eps,
        )

    def step(self, grads: GradMap | Sequence[np.ndarray]) -> None:
        if isinstance(grads, GradMap):
            grads = [grads[p] for p in self.params]
        adam_step(self.params, grads, self.state, self.lr)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              learning_rate: float) -> None:
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ValueError("params, grads and optimizer state differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape)
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NonFiniteGradientError(
                f"non-finite gradient for parameter {i} ({p.name or 'unnamed'}, "
                f"shape {p.shape}): {bad} bad entries at optimizer step {state.step_count + 1}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if learning_rate == 0.0:
            continue
        p.data -= learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
