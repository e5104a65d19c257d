"""Tiny parameter containers for the toy networks."""
from __future__ import annotations

from collections import Counter
from typing import Dict, Iterator, Optional

import numpy as np

from .autodiff import Tensor, conv2d


class Module:
    """Attribute-discovered tree of named parameters.

    Parameters are ``Tensor`` attributes with ``requires_grad=True``; child
    modules and lists of modules are walked in attribute-definition order so
    names (and therefore checkpoints) are stable.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv(Module):
    """Conv layer with He-normal weights (or zeros when ``zero=True``)."""

    def __init__(self, cin: int, cout: int, k: int = 3, rng: Optional[np.random.Generator] = None,
                 groups: int = 1, bias: bool = True, zero: bool = False, gain: float = 1.0,
                 stride: int = 1):
        shape = (cout, cin // groups, k, k)
        if zero or rng is None:
            w = np.zeros(shape)
        else:
            fan_in = shape[1] * k * k
            w = rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), size=shape)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        self.groups = groups
        self.stride = stride
        self.padding = (k - 1) // 2

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding, groups=self.groups)


# Incremented by every teacher-side constructor (SPGRM, SKAM, FPN, prior
# extraction) so the inference path can prove it built none of them.
CONSTRUCTED: Counter = Counter()


def reset_construction_counts():
    CONSTRUCTED.clear()
