"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np

from .tensor import Tensor, backward


def numerical_gradient(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. each entry of ``x``."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradcheck(
    f: Callable[..., Tensor],
    x: Union[Tensor, Sequence[Tensor]],
    h: float = 1e-5,
) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.

    ``f`` is called with the input tensor(s) and must return a scalar.  The
    inputs are perturbed in place and restored afterwards.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    loss = f(*xs)
    backward(loss)
    worst = 0.0
    for t in xs:
        analytic = np.zeros_like(t.data) if t.grad is None else np.array(t.grad)
        numeric = numerical_gradient(lambda: f(*xs), t, h)
        err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
