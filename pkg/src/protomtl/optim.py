"""Adam with decoupled weight decay, in deterministic parameter order."""
from __future__ import annotations

import numpy as np

from .autodiff import Parameter


class AdamW:
    def __init__(
        self,
        params: list[Parameter],
        lr: float = 1e-4,
        weight_decay: float = 0.01,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = sorted(params, key=lambda p: p.name)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * update + self.lr * self.weight_decay * p.data

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params:
            total += float((p.grad * p.grad).sum())
        return float(np.sqrt(total))

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for p in self.params:
            out[f"adam.m/{p.name}"] = self.m[p.name]
            out[f"adam.v/{p.name}"] = self.v[p.name]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for p in self.params:
            self.m[p.name] = np.asarray(arrays[f"adam.m/{p.name}"], dtype=np.float64).copy()
            self.v[p.name] = np.asarray(arrays[f"adam.v/{p.name}"], dtype=np.float64).copy()
        self.step_count = int(step_count)
