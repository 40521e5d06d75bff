"""Shared numerical helpers for the test suite."""
from __future__ import annotations

import numpy as np

from usdc.autograd import Tensor

SEEDS = list(range(10))


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(loss_fn, tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn()`` (a float) w.r.t. every element of ``tensor.data``."""
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = loss_fn()
        flat[i] = old - h
        down = loss_fn()
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def check_grads(build_loss, tensors: list[Tensor], h: float = 1e-5) -> float:
    """Max relative error between autograd and finite differences over ``tensors``.

    ``build_loss`` returns a scalar Tensor built from ``tensors``.
    """
    for t in tensors:
        t.grad = None
    build_loss().backward()
    analytic = [t.grad.copy() for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        n = numeric_grad(lambda: float(build_loss().data), t, h)
        worst = max(worst, rel_err(a, n))
    return worst
