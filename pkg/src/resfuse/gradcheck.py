"""Central finite differences, the independent oracle for every
analytic gradient in the library.

``finite_diff_grad`` is pure: it perturbs parameter values in place,
evaluates, and restores; it never reads or writes grad buffers. Checks
run in float64 so that the h² truncation error of central differences
sits far below the tolerances being enforced.
"""

from __future__ import annotations

import numpy as np

from .params import Parameter
from .tensor import no_grad


def finite_diff_grad(f, param: Parameter, h: float = 1e-3) -> np.ndarray:
    """d f / d param by central differences, elementwise."""
    if h <= 0:
        raise ValueError("finite_diff_grad: h must be positive")
    data = param.value.data
    flat = data.reshape(-1)
    grad = np.zeros_like(flat, dtype=np.float64)
    def scalar(v) -> float:
        return v.item() if hasattr(v, "item") else float(v)

    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = scalar(f())
            flat[i] = orig - h
            fm = scalar(f())
            flat[i] = orig
            grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(data.shape).astype(data.dtype)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray,
                  floor: float = 1e-6) -> float:
    """Largest elementwise relative error, with an absolute floor below
    which disagreement is ignored."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    b = np.asarray(numeric, dtype=np.float64).reshape(-1)
    diff = np.abs(a - b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    rel = diff / denom
    rel[diff <= floor] = 0.0
    return float(rel.max()) if rel.size else 0.0


def check_gradients(f, params, h: float = 1e-3, floor: float = 1e-6) -> float:
    """Compare ``backward`` grads of scalar ``f(params)`` against finite
    differences over every parameter; returns the worst relative error."""
    for p in params:
        p.value.zero_grad()
    loss = f()
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = p.value.grad
        if analytic is None:
            analytic = np.zeros_like(p.value.data)
        numeric = finite_diff_grad(f, p, h=h)
        worst = max(worst, max_rel_error(analytic, numeric, floor=floor))
    return worst
