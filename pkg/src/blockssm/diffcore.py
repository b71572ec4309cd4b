"""Dense-matrix reverse-mode differentiation.

Values are 2-D float64 numpy arrays wrapped in :class:`Tensor`.  Operations
executed while a :class:`Tape` is active are recorded in order; calling
``tape.backward(root)`` replays them in reverse and accumulates gradients into
every :class:`Param` reached.  Without an active tape the same functions only
compute values, which is what evaluation code uses.

    >>> w = Param(np.array([[3.0]]))
    >>> with Tape() as tape:
    ...     y = matmul(w, w)
    >>> tape.backward(y)
    >>> w.grad
    array([[6.]])
"""
from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError", "NonFiniteError", "TapeError",
    "Tensor", "Param", "Tape", "as_tensor", "active_tape", "no_grad",
    "matmul", "add", "sub", "mul", "div", "neg", "scale", "transpose",
    "concat", "slice_rows", "slice_cols", "softmax_rows", "sigmoid", "tanh",
    "sqrt", "exp", "square", "relu", "gelu", "blu", "sum_all", "mean_all",
    "frobenius",
]


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """A computation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of a tape (non-scalar root, double backward, ...)."""


_ids = itertools.count()
_tape_stack: list["Tape"] = []


class Tensor:
    """A 2-D value, optionally produced by a recorded operation."""

    __slots__ = ("value", "grad", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, value, parents=(), backward=None):
        self.value = value
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Param(Tensor):
    """A trainable leaf whose gradient persists across backward passes."""

    __slots__ = ("id", "name")

    def __init__(self, value, name: str = ""):
        value = _as_matrix(value).copy()
        _check_finite(value, "param")
        super().__init__(value)
        self.grad = np.zeros_like(value)
        self.id = next(_ids)
        self.name = name

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape})"


class Tape:
    """Ordered record of operations for one forward/backward pass.

    Used as a context manager; tapes nest, and the innermost one records.
    A tape can be consumed by exactly one ``backward`` call.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node: Tensor) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        self.nodes.append(node)

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(param) into ``param.grad`` for reachable params."""
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        if root.value.shape != (1, 1):
            raise TapeError(f"backward root must be 1x1, got {root.shape}")
        if not any(node is root for node in reversed(self.nodes)):
            raise TapeError("root was not produced on this tape")
        self.consumed = True
        root.grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            grads = node._backward(g)
            for parent, pg in zip(node._parents, grads):
                if pg is None or (parent._backward is None and not isinstance(parent, Param)):
                    continue
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg
            node.grad = None
        # release graph references held by intermediates
        for node in self.nodes:
            node._parents = ()
            node._backward = None
        self.nodes = []


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


class no_grad:
    """Context manager suspending recording on any outer tape."""

    def __enter__(self):
        self._saved = list(_tape_stack)
        _tape_stack.clear()

    def __exit__(self, *exc):
        _tape_stack.extend(self._saved)
        return False


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected a matrix, got ndim={a.ndim}")
    return a


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(_as_matrix(x))


def _check_finite(value: np.ndarray, op: str) -> None:
    # the sum is finite only if every entry is; an overflowing sum falls back to the exact test
    if not math.isfinite(value.sum()) and not np.isfinite(value).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def _make(value: np.ndarray, op: str, parents: Sequence[Tensor],
          backward: Callable) -> Tensor:
    if not math.isfinite(value.sum()):
        _check_finite(value, op)
    if not _tape_stack:
        return Tensor(value)
    node = Tensor(value, tuple(parents), backward)
    _tape_stack[-1].record(node)
    return node


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    (ra, ca), (rb, cb) = a.shape, b.shape
    if (ra != rb and ra != 1 and rb != 1) or (ca != cb and ca != 1 and cb != 1):
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}")
    return max(ra, rb), max(ca, cb)


# ---------------------------------------------------------------------------
# binary ops

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, "matmul", (a, b),
                 lambda g: (g @ bv.T, av.T @ g))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.value, b.value, "add")
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value + b.value, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.value, b.value, "sub")
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value - b.value, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with row/column broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.value, b.value, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.value, b.value, "div")
    av, bv = a.value, b.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv

    def backward(g):
        ga = g / bv
        return _unbroadcast(ga, av.shape), _unbroadcast(-ga * out, bv.shape)

    return _make(out, "div", (a, b), backward)


# ---------------------------------------------------------------------------
# unary ops

def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.value, "neg", (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.value * c, "scale", (a,), lambda g: (g * c,))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.value.T.copy(), "transpose", (a,), lambda g: (g.T,))


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of nothing")
    other = 1 - axis
    if len({p.value.shape[other] for p in parts}) != 1:
        raise ShapeError(f"concat axis={axis}: {[p.shape for p in parts]}")
    sizes = [p.value.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([p.value for p in parts], axis=axis)

    def backward(g):
        if axis == 0:
            return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(out, "concat", parts, backward)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    n = a.value.shape[0]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice_rows [{start}:{stop}] of {a.shape}")
    shape = a.value.shape

    def backward(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _make(a.value[start:stop], "slice_rows", (a,), backward)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    n = a.value.shape[1]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice_cols [{start}:{stop}] of {a.shape}")
    shape = a.value.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make(a.value[:, start:stop], "slice_cols", (a,), backward)


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, "softmax_rows", (a,), backward)


def _logistic(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _logistic(a.value)
    return _make(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.value)
    return _make(t, "tanh", (a,), lambda g: (g * (1.0 - t * t),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        r = np.sqrt(a.value)
    return _make(r, "sqrt", (a,), lambda g: (g * 0.5 / r,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.value)
    return _make(e, "exp", (a,), lambda g: (g * e,))


def square(a) -> Tensor:
    a = as_tensor(a)
    v = a.value
    return _make(v * v, "square", (a,), lambda g: (2.0 * g * v,))


def relu(a) -> Tensor:
    """max(0, a); the subgradient at exactly 0 is taken as 0."""
    a = as_tensor(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), "relu", (a,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """x * Phi(x) with the exact erf form of the normal CDF."""
    a = as_tensor(a)
    x = a.value
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, "gelu", (a,), backward)


def blu(a, beta) -> Tensor:
    """Bendable linear unit ``beta * (sqrt(x^2 + 1) - 1) + x``.

    ``beta`` is a 1x1 tensor clamped to [-1, 1]; the clamp passes no gradient
    once saturated.
    """
    a, beta = as_tensor(a), as_tensor(beta)
    if beta.value.shape != (1, 1):
        raise ShapeError(f"blu beta must be 1x1, got {beta.shape}")
    x = a.value
    b_raw = float(beta.value[0, 0])
    b = min(1.0, max(-1.0, b_raw))
    root = np.sqrt(x * x + 1.0)
    bend = root - 1.0

    def backward(g):
        gb = np.array([[float((g * bend).sum())]]) if -1.0 <= b_raw <= 1.0 else np.zeros((1, 1))
        return g * (b * x / root + 1.0), gb

    return _make(b * bend + x, "blu", (a, beta), backward)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.value.shape
    return _make(np.array([[a.value.sum()]]), "sum", (a,),
                 lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.value.shape
    n = a.value.size
    return _make(np.array([[a.value.sum() / n]]), "mean", (a,),
                 lambda g: (np.full(shape, g[0, 0] / n),))


def frobenius(a) -> Tensor:
    """Frobenius norm; the gradient at the zero matrix is taken as zero."""
    a = as_tensor(a)
    v = a.value
    nrm = float(np.sqrt((v * v).sum()))

    def backward(g):
        if nrm == 0.0:
            return (np.zeros_like(v),)
        return (g[0, 0] * v / nrm,)

    return _make(np.array([[nrm]]), "frobenius", (a,), backward)
