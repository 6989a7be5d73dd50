"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, zero_grad

DENOMINATOR_FLOOR = 1e-5


def numerical_gradient(fn: Callable[[], Tensor], leaf: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``leaf.data``."""
    base = leaf.data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        plus = base.copy().reshape(-1)
        minus = base.copy().reshape(-1)
        plus[i] += step
        minus[i] -= step
        leaf.data = plus.reshape(base.shape)
        f_plus = fn().item()
        leaf.data = minus.reshape(base.shape)
        f_minus = fn().item()
        flat[i] = (f_plus - f_minus) / (2.0 * step)
    leaf.data = base
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, 1e-5)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOMINATOR_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(fn: Callable[[], Tensor], leaves: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between backprop and finite differences over ``leaves``."""
    zero_grad(leaves)
    backward(fn())
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = numerical_gradient(fn, leaf, step)
        worst = max(worst, relative_error(analytic, numeric))
    zero_grad(leaves)
    return worst
