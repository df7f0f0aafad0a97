"""Adam optimizer with per-block freezing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, block: str):
        self.block = block
        super().__init__(f"non-finite gradient in parameter block '{block}'")


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             frozen: set[str] | frozenset[str] = frozenset()) -> None:
        """Update ``params`` in place.

        Blocks named in ``frozen`` are skipped entirely: neither their values
        nor their moment estimates change.
        """
        for name, g in grads.items():
            if name in frozen:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(name)
            if params[name].shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} does not match block '{name}' {params[name].shape}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, g in grads.items():
            if name in frozen:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
