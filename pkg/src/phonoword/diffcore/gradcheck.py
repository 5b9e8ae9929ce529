"""Central finite differences, used as the independent oracle for backprop."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import NonFiniteError, Tensor


def _scalar(value) -> float:
    v = float(value.data) if isinstance(value, Tensor) else float(value)
    if not np.isfinite(v):
        raise NonFiniteError(f"objective returned {v}")
    return v


def finite_difference_gradient(f: Callable[[Tensor], object], x, h: float = 1e-5) -> np.ndarray:
    """(f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate of ``x``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(Tensor(base.copy())))
        flat[i] = orig - h
        fm = _scalar(f(Tensor(base.copy())))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


def check_param_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                          h: float = 1e-5, names=None) -> dict[str, float]:
    """Compare backprop against finite differences for each named parameter.

    ``loss_fn`` must rebuild the graph from the current parameter values.
    Returns the max relative error per parameter.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    errors = {}
    for name in names or list(params):
        p = params[name]
        original = p.data

        def f(t: Tensor, p=p):
            p.data = t.data
            return loss_fn()

        numeric = finite_difference_gradient(f, original, h)
        p.data = original
        errors[name] = relative_error(analytic[name], numeric)
    return errors
