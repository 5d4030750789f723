"""Central finite-difference checks for the autograd engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_gradient(fn: Callable[[], Tensor], target: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """d fn() / d target by central differences; ``target`` is perturbed in place."""
    grad = np.zeros_like(target, dtype=np.float64)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(fn().data)
        flat[i] = orig - eps
        lo = float(fn().data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> list[float]:
    """Relative error between backward() and finite differences, one per input.

    ``fn`` must rebuild the graph from ``inputs`` on every call and be
    deterministic (seed any dropout inside it).
    """
    for t in inputs:
        t.zero_grad()
    fn().backward()
    analytic = [np.array(t.grad if t.grad is not None else np.zeros_like(t.data)) for t in inputs]
    return [relative_error(a, numerical_gradient(fn, t.data, eps)) for a, t in zip(analytic, inputs)]
