"""Adam with bias-corrected moments."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
    """Update ``params`` in place: ``p -= lr * m_hat / (sqrt(v_hat) + eps)``."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params: "OrderedDict[str, Tensor]", lr: float = 1e-5,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr, betas[0], betas[1], eps)

    @property
    def step_count(self) -> int:
        return self.state.step

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step(self.state, self.params, {k: p.grad for k, p in self.params.items()})

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name in self.params:
            if name in self.state.m:
                out[f"adam.m/{name}"] = self.state.m[name]
                out[f"adam.v/{name}"] = self.state.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        self.state.step = step
        for name in self.params:
            if f"adam.m/{name}" in arrays:
                self.state.m[name] = np.array(arrays[f"adam.m/{name}"], dtype=np.float64)
                self.state.v[name] = np.array(arrays[f"adam.v/{name}"], dtype=np.float64)
