"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Every operation records its inputs and a closure mapping the output gradient
to input gradients. ``backward`` walks the recorded graph in reverse
topological order. Leaf gradients accumulate across ``backward`` calls until
``zero_grad`` is called, the usual training-loop convention.

Covariance is the population (divide-by-N) form throughout, which makes the
ensemble variance decomposition an exact identity.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "NonFiniteError",
    "Tensor",
    "tensor",
    "no_grad",
    "backward",
    "zero_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "square",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "index",
    "conv2d",
    "avgpool",
    "log_softmax",
    "softmax",
    "softmax_cross_entropy",
    "mse",
    "covariance",
]

_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """An n-dimensional float64 array with optional gradient tracking.

    ``data`` is treated as immutable once created; optimizers rebind it to a
    fresh array instead of writing in place so recorded graphs stay valid.
    """

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, _op: str = "", _owned=False):
        arr = np.asarray(data, dtype=np.float64) if _owned else np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by {_op or 'tensor construction'}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = _backward
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        """Same values, cut from the graph. Used for stop-gradient targets."""
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if track:
        return Tensor(data, requires_grad=True, _parents=parents, _backward=grad_fn, _op=op, _owned=True)
    return Tensor(data, requires_grad=False, _op=op, _owned=True)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph traversal


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        assert mark != 1, "cycle in autodiff graph"
        state[key] = 1
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad:
                pmark = state.get(id(parent))
                assert pmark != 1, "cycle in autodiff graph"
                if pmark is None:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from ``loss``.

    Leaf gradients accumulate; call :func:`zero_grad` between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if not np.isfinite(pg).all():
                raise NonFiniteError(f"non-finite gradient flowing out of {node._op}")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def grad_fn(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _make(out, (a, b), grad_fn, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), grad_fn, "matmul")


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn, "concat")


def index(a, key) -> Tensor:
    a = _as_tensor(a)
    out = a.data[key]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out), (a,), grad_fn, "index")


# ---------------------------------------------------------------------------
# convolution and pooling


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [N,C,H,W] input, got shape {x.shape}")
    return x, False


def conv2d(x, kernels, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` ([C,H,W] or [N,C,H,W]) with ``kernels`` [O,C,kH,kW].

    Output spatial size is ``(H + 2*padding - kH) // stride + 1``.
    """
    x, squeeze = _batched(_as_tensor(x))
    kernels = _as_tensor(kernels)
    if stride <= 0:
        raise ValueError("stride must be positive")
    if padding < 0:
        raise ValueError("padding must be non-negative")
    n, c, h, w = x.shape
    if kernels.ndim != 4 or kernels.shape[1] != c:
        raise ValueError(f"kernel shape {kernels.shape} incompatible with input channels {c}")
    o, _, kh, kw = kernels.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernels.data.reshape(o, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents: tuple[Tensor, ...] = (x, kernels)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (o,):
            raise ValueError(f"bias shape {bias.shape} != ({o},)")
        out = out + bias.data.reshape(1, o, 1, 1)
        parents = parents + (bias,)

    def grad_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gk = (gmat.T @ cols).reshape(kernels.shape)
        gx = None
        if x.requires_grad:
            gcols = np.ascontiguousarray((gmat @ kmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2))
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    result = _make(out, parents, grad_fn, "conv2d")
    return reshape(result, result.shape[1:]) if squeeze else result


def avgpool(x, window: int) -> Tensor:
    """Non-overlapping mean pooling; trailing rows/columns that do not fill a window are dropped."""
    x, squeeze = _batched(_as_tensor(x))
    n, c, h, w = x.shape
    if window <= 0:
        raise ValueError("window must be positive")
    if window > h or window > w:
        raise ValueError(f"pool window {window} larger than input {h}x{w}")
    ho, wo = h // window, w // window
    trimmed = x.data[:, :, : ho * window, : wo * window]
    out = trimmed.reshape(n, c, ho, window, wo, window).mean(axis=(3, 5))

    def grad_fn(g):
        full = np.zeros_like(x.data)
        spread = np.repeat(np.repeat(g, window, axis=2), window, axis=3) / (window * window)
        full[:, :, : ho * window, : wo * window] = spread
        return (full,)

    result = _make(out, (x,), grad_fn, "avgpool")
    return reshape(result, result.shape[1:]) if squeeze else result


# ---------------------------------------------------------------------------
# losses and statistics


def log_softmax(logits, axis: int = -1) -> Tensor:
    logits = _as_tensor(logits)
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def grad_fn(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (logits,), grad_fn, "log_softmax")


def softmax(logits, axis: int = -1) -> Tensor:
    return exp(log_softmax(logits, axis=axis))


def softmax_cross_entropy(logits, target, reduction: str = "mean") -> Tensor:
    """-sum(target * log softmax(logits)) over the last axis.

    ``logits`` and ``target`` are [K] or [N,K]; with a batch the per-sample
    losses are averaged (``reduction="mean"``) or returned (``"none"``).
    """
    logits, target = _as_tensor(logits), _as_tensor(target)
    if logits.shape != target.shape:
        raise ValueError(f"class-count mismatch: logits {logits.shape} vs target {target.shape}")
    if not np.allclose(target.data.sum(axis=-1), 1.0, atol=1e-9, rtol=0):
        raise ValueError("target distribution must sum to 1")
    per_sample = neg(sum(mul(target.detach(), log_softmax(logits)), axis=-1))
    if reduction == "none" or logits.ndim == 1:
        return per_sample
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    return mean(per_sample)


def mse(pred, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return mean(square(sub(pred, target)))


def covariance(u, v, axis: int = -1) -> Tensor:
    """Population covariance (1/N) sum (u - mean u)(v - mean v) along ``axis``."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    if u.ndim == 0 or u.shape[axis] == 0:
        raise ValueError("covariance needs at least one observation")
    du = sub(u, mean(u, axis=axis, keepdims=True))
    dv = sub(v, mean(v, axis=axis, keepdims=True))
    return mean(mul(du, dv), axis=axis)
