"""Finite-difference gradient checking for the autodiff core.

Central differences with a fixed step are compared against the analytic
reverse-mode gradients. The numeric side never touches the tape: it only
re-evaluates the forward function at perturbed inputs.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["numeric_gradient", "max_relative_error", "check_gradients"]


def numeric_gradient(f, tensors, wrt: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central-difference d f(tensors) / d wrt, elementwise."""
    base = wrt.data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(*tensors).item()
        flat[i] = orig - eps
        lo = f(*tensors).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(1.0, float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def check_gradients(f, tensors, eps: float = 1e-6) -> float:
    """Run f once with backward, finite-difference every grad-tracked input.

    Returns the worst relative error over all checked tensors.
    """
    for t in tensors:
        t.zero_grad()
    loss = f(*tensors)
    loss.backward()
    worst = 0.0
    for t in tensors:
        if not t.requires_grad:
            continue
        assert t.grad is not None, "backward left a requires_grad input without grad"
        num = numeric_gradient(f, tensors, t, eps=eps)
        worst = max(worst, max_relative_error(t.grad, num))
    return worst
