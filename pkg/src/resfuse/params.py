"""Named trainable parameters and deterministic initializers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class Parameter:
    """A uniquely named model weight."""

    name: str
    value: Tensor
    trainable: bool = True


class ParamSet:
    """Parameters keyed by name; iteration is lexicographic by name."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value: Tensor, trainable: bool = True) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        value.requires_grad = trainable
        p = Parameter(name, value, trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def __iter__(self):
        for name in sorted(self._params):
            yield self._params[name]

    def trainable(self):
        return [p for p in self if p.trainable]

    def zero_grad(self):
        for p in self:
            p.value.zero_grad()

    def count(self, trainable_only: bool = False) -> int:
        return sum(p.value.size for p in self if p.trainable or not trainable_only)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.data for p in self}


def he_conv(rng: np.random.Generator, cout: int, cin: int, k: int, dtype=np.float32) -> np.ndarray:
    """He fan-in normal init for a ReLU conv kernel."""
    fan_in = cin * k * k * k
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal((cout, cin, k, k, k)) * std).astype(dtype)
