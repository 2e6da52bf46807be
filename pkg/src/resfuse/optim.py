"""Bias-corrected Adam, applied in deterministic parameter-name order."""

from __future__ import annotations

import numpy as np

from .params import ParamSet


class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step: int = 0

    def ensure(self, name: str, like: np.ndarray):
        if name not in self.m:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)


def adam_step(params: ParamSet, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One update over every trainable parameter with a populated grad."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p in params:
        if not p.trainable:
            continue
        g = p.value.grad
        if g is None:
            g = np.zeros_like(p.value.data)
        state.ensure(p.name, p.value.data)
        m, v = state.m[p.name], state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.value.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.value.data.dtype)
