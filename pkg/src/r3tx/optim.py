"""Adam with a fixed learning rate (no warmup, no decay)."""

from __future__ import annotations

from typing import Dict

import numpy as np

from .autodiff import Tensor


class Adam:
    def __init__(self, params: Dict[str, Tensor], lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"adam.m/{name}"] = self.m[name]
            out[f"adam.v/{name}"] = self.v[name]
        return out

    def load_state(self, blocks: Dict[str, np.ndarray], t: int) -> None:
        for name in self.params:
            self.m[name] = np.array(blocks[f"adam.m/{name}"], dtype=np.float64)
            self.v[name] = np.array(blocks[f"adam.v/{name}"], dtype=np.float64)
        self.t = t
