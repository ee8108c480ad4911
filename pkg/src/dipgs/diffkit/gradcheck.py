"""Central finite-difference checks against :func:`backward`."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)`` with a tiny floor for all-zero pairs."""
    diff = np.linalg.norm(np.ravel(analytic - numeric))
    scale = max(np.linalg.norm(np.ravel(analytic)), np.linalg.norm(np.ravel(numeric)), 1e-12)
    return float(diff / scale)


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-4) -> np.ndarray:
    grad = np.zeros(param.shape)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = fn().item()
            flat[i] = orig - step
            minus = fn().item()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * step)
    return grad


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor],
                    step: float = 1e-4) -> list[float]:
    """Return the relative error of the analytic gradient for each parameter."""
    loss = fn()
    grads = backward(loss, params)
    errors = []
    for p in params:
        analytic = grads[p].copy()
        errors.append(relative_error(analytic, numerical_gradient(fn, p, step)))
    return errors


def check_directional(fn: Callable[[], Tensor], params: Sequence[Tensor], rng: np.random.Generator,
                      directions: int = 3, step: float = 1e-5) -> float:
    """Worst relative error of ``<grad, v>`` against a central difference along random ``v``.

    Cheap stand-in for the full check when the parameter count is in the thousands.
    """
    grads = backward(fn(), params)
    analytic = [grads[p].copy() for p in params]
    worst = 0.0
    for _ in range(directions):
        vs = [rng.normal(size=p.shape) for p in params]
        norm = np.sqrt(sum(float((v * v).sum()) for v in vs))
        vs = [v / norm for v in vs]
        exact = sum(float((g * v).sum()) for g, v in zip(analytic, vs))
        saved = [p.data.copy() for p in params]
        with no_grad():
            for p, v, s in zip(params, vs, saved):
                p.data[...] = s + step * v
            plus = fn().item()
            for p, v, s in zip(params, vs, saved):
                p.data[...] = s - step * v
            minus = fn().item()
            for p, s in zip(params, saved):
                p.data[...] = s
        worst = max(worst, relative_error(np.array([exact]), np.array([(plus - minus) / (2 * step)])))
    return worst
