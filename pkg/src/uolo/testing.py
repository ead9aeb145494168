"""Finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["numerical_gradient", "analytic_gradient", "max_relative_error", "gradcheck"]

REL_FLOOR = 1e-5


def numerical_gradient(fn: Callable[[], Tensor], wrt: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to ``wrt.data``."""
    grad = np.zeros_like(wrt.data)
    flat = wrt.data.reshape(-1)
    gflat = grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = float(fn().data)
            flat[i] = orig - h
            minus = float(fn().data)
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * h)
    return grad


def analytic_gradient(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.zero_grad()
    tape = T.Tape()
    with T.using_tape(tape):
        T.backward(fn())
    grads = [t.grad.copy() for t in inputs]
    for t in inputs:
        t.zero_grad()
    return grads


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = REL_FLOOR) -> float:
    """Largest ``|a - b| / max(|a|, |b|, floor)`` over all entries."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst elementwise relative error between analytic and numerical gradients."""
    analytic = analytic_gradient(fn, inputs)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        worst = max(worst, max_relative_error(a, numerical_gradient(fn, t, h)))
    return worst
