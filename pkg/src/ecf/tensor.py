"""Dense float64 tensors with a small reverse-mode tape.

Only the handful of operations the recommender needs are provided.  Every
operation checks its forward output for NaN/Inf and raises
:class:`NonFiniteError` naming the operation, so a diverging run fails loudly
at the first bad value instead of several layers later.

Graphs are recorded only inside an active :class:`Tape`::

    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    x.grad

Nodes are appended to the tape in creation order, which is a topological
order, so the backward sweep simply walks the list in reverse.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "AdamState",
    "adam_step",
    "tensor",
    "matmul",
    "transpose",
    "reshape",
    "row_cosine",
    "sigmoid",
    "log_sigmoid",
    "log",
    "exp",
    "sqrt",
    "relu",
    "absolute",
    "row_softmax",
    "row_log_softmax",
    "gather_rows",
    "spmm",
    "detach_gradient",
    "straight_through",
    "topk_mask",
    "straight_through_topk",
]

NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_local = threading.local()


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Records operations executed while it is the active tape."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> Tape:
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def backward(self, output: Tensor, seed: np.ndarray | None = None) -> None:
        """Propagate adjoints from ``output`` to every recorded node.

        ``seed`` defaults to 1 and is required for non-scalar outputs.
        Leaf gradients accumulate into ``.grad``.
        """
        if seed is None:
            if output.data.size != 1:
                raise ShapeError("backward on a non-scalar output needs an explicit seed")
            seed = np.ones_like(output.data)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise ShapeError(f"seed shape {seed.shape} != output shape {output.shape}")
        _accumulate(output, seed)
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is not None and parent.requires_grad:
                    _accumulate(parent, g)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _accumulate(node: Tensor, g: np.ndarray) -> None:
    g = _unbroadcast(np.asarray(g, dtype=np.float64), node.shape)
    if node.grad is None:
        node.grad = g.copy()
    else:
        node.grad = node.grad + g


class Tensor:
    """A float64 array that can take part in a recorded graph."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        tape.nodes.append(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"'{op}': cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_check("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_check("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_check("mul", a, b)
    return _make("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_check("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _make("div", out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a) -> Tensor:
    a = tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = tensor(a)
    out = a.data**exponent
    return _make("power", out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    safe = np.where(out > 0, out, 1.0)
    return _make("sqrt", out, (a,), lambda g: (np.where(out > 0, 0.5 * g / safe, 0.0),))


def absolute(a) -> Tensor:
    a = tensor(a)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = tensor(a)
    return _make("relu", np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a) -> Tensor:
    a = tensor(a)
    out = _sigmoid(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a) -> Tensor:
    """``log(sigmoid(x))`` without the underflow of composing the two."""
    a = tensor(a)
    out = -np.logaddexp(0.0, -a.data)
    return _make("log_sigmoid", out, (a,), lambda g: (g * _sigmoid(-a.data),))


# -- reductions and shape ops -------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make("sum", np.asarray(out, dtype=np.float64), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"'reshape': cannot reshape {a.shape} into {shape}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = tensor(a)
    if a.ndim < 2:
        raise ShapeError("'transpose' needs at least 2 dimensions")
    return _make("transpose", np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"'matmul': incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make("matmul", out, (a, b), backward)


def gather_rows(a, index) -> Tensor:
    """Rows of ``a`` selected by an integer index array (repeats allowed)."""
    a = tensor(a)
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make("gather_rows", a.data[index], (a,), backward)


def spmm(matrix: sp.spmatrix, a) -> Tensor:
    """Constant sparse matrix times a dense tensor."""
    a = tensor(a)
    if matrix.shape[1] != a.shape[0]:
        raise ShapeError(f"'spmm': incompatible shapes {matrix.shape} @ {a.shape}")
    matrix = sp.csr_matrix(matrix)
    out = np.asarray(matrix @ a.data)
    return _make("spmm", out, (a,), lambda g: (np.asarray(matrix.T @ g),))


# -- fused row operations -----------------------------------------------------

def row_cosine(a, b) -> Tensor:
    """Cosine similarity between every row of ``a`` and every row of ``b``.

    Row norms get ``NORM_EPS`` added, so an all-zero row has similarity 0.
    """
    a, b = tensor(a), tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"'row_cosine': incompatible shapes {a.shape}, {b.shape}")
    ra = np.linalg.norm(a.data, axis=1, keepdims=True)
    rb = np.linalg.norm(b.data, axis=1, keepdims=True)
    a_hat = a.data / (ra + NORM_EPS)
    b_hat = b.data / (rb + NORM_EPS)
    out = a_hat @ b_hat.T

    def unit_backward(x, r, x_hat, g_hat):
        dot = np.sum(x * g_hat, axis=1, keepdims=True)
        safe_r = np.where(r > 0, r, 1.0)
        return g_hat / (r + NORM_EPS) - x * dot / (safe_r * (r + NORM_EPS) ** 2)

    def backward(g):
        ga = unit_backward(a.data, ra, a_hat, g @ b_hat)
        gb = unit_backward(b.data, rb, b_hat, g.T @ a_hat)
        return ga, gb

    return _make("row_cosine", out, (a, b), backward)


def row_softmax(a, temperature: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``a / temperature``."""
    a = tensor(a)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = a.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)) / temperature,)

    return _make("row_softmax", out, (a,), backward)


def row_log_softmax(a, temperature: float = 1.0) -> Tensor:
    a = tensor(a)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = a.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    soft = np.exp(out)

    def backward(g):
        return ((g - soft * g.sum(axis=-1, keepdims=True)) / temperature,)

    return _make("row_log_softmax", out, (a,), backward)


# -- gradient routing -----------------------------------------------------------

def detach_gradient(a) -> Tensor:
    """Identity in the forward pass, a gradient sink in the backward pass."""
    a = tensor(a)
    return Tensor(a.data)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``; backward adjoint routed unchanged to ``soft``.

    Equivalent to ``soft + detach_gradient(hard - soft)`` except that the
    forward value is exactly ``hard`` rather than rounded through the sum.
    """
    soft = tensor(soft)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeError(f"'straight_through': {hard.shape} vs {soft.shape}")
    return _make("straight_through", hard.copy(), (soft,), lambda g: (g,))


def topk_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Binary mask marking the ``k`` largest entries of each row.

    Ties go to the lowest index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    width = scores.shape[-1]
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > width:
        raise ValueError(f"k={k} exceeds row length {width}")
    if k == width:
        return np.ones(scores.shape, dtype=np.float64)
    kth = -np.partition(-scores, k - 1, axis=-1)[..., k - 1 : k]
    above = scores > kth
    tied = scores == kth
    room = k - above.sum(axis=-1, keepdims=True)
    return (above | (tied & (np.cumsum(tied, axis=-1) <= room))).astype(np.float64)


def straight_through_topk(scores, k: int, temperature: float, mode: str = "softmax_st") -> Tensor:
    """Hard Top-K row mask whose gradient is that of a tempered softmax.

    ``mode="sigmoid_only"`` returns the mask as a constant instead, so no
    gradient flows through the selection at all.
    """
    scores = tensor(scores)
    hard = topk_mask(scores.data, k)
    if mode == "sigmoid_only":
        return Tensor(hard)
    if mode != "softmax_st":
        raise ValueError(f"unknown straight-through mode {mode!r}")
    return straight_through(hard, row_softmax(scores, temperature))


# -- optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    """Moment buffers and hyperparameters for :func:`adam_step`."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first: list[np.ndarray] = field(default_factory=list)
    second: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> AdamState:
        state = cls(**kwargs)
        state.first = [np.zeros_like(p.data) for p in params]
        state.second = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(
    state: AdamState,
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    rows: Sequence[np.ndarray | None] | None = None,
) -> None:
    """Apply one bias-corrected Adam update in place.

    ``rows`` optionally gives, per parameter, a boolean mask over the first
    axis; rows outside the mask keep both their values and their moments.
    A ``None`` gradient counts as zero.
    """
    if len(params) != len(state.first):
        raise ShapeError("parameter count does not match optimizer state")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for idx, p in enumerate(params):
        g = np.zeros_like(p.data) if grads[idx] is None else np.asarray(grads[idx], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {idx}")
        m, v = state.first[idx], state.second[idx]
        sel = slice(None) if rows is None or rows[idx] is None else np.asarray(rows[idx], dtype=bool)
        m[sel] = state.beta1 * m[sel] + (1.0 - state.beta1) * g[sel]
        v[sel] = state.beta2 * v[sel] + (1.0 - state.beta2) * g[sel] ** 2
        p.data[sel] -= state.lr * (m[sel] / c1) / (np.sqrt(v[sel] / c2) + state.eps)
