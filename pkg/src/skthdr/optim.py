"""Adam with bias correction, operating in place on parameter tensors."""
from __future__ import annotations

from typing import Dict, List, Sequence

import numpy as np

from .errors import ShapeMismatch


def adam_step(params: List[np.ndarray], grads: List[np.ndarray], state: Dict, lr: float = 2e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Dict:
    """One Adam update of ``params`` (modified in place); returns ``state``."""
    if len(params) != len(grads):
        raise ShapeMismatch("one gradient per parameter required")
    if not state:
        state.update(t=0, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m, v = state["m"][i], state["v"][i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    """Adam over a fixed list of :class:`~skthdr.autodiff.Tensor` parameters."""

    def __init__(self, params: Sequence, lr: float = 2e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.state: Dict = {}

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, self.lr, *self.betas, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        if not self.state:
            return {"t": np.zeros(1)}
        out = {"t": np.array([float(self.state["t"])])}
        for i in range(len(self.params)):
            out[f"m.{i}"] = self.state["m"][i]
            out[f"v.{i}"] = self.state["v"][i]
        return out

    def load_state_dict(self, sd: Dict[str, np.ndarray]):
        t = int(sd["t"][0])
        if t == 0:
            self.state = {}
            return
        self.state = {"t": t,
                      "m": [np.array(sd[f"m.{i}"]) for i in range(len(self.params))],
                      "v": [np.array(sd[f"v.{i}"]) for i in range(len(self.params))]}
