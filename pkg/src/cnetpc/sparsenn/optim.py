from __future__ import annotations

import numpy as np

from .layers import Param

BASE_LR = 15e-5
LR_STEP = 2
LR_GAMMA = 0.95


def lr_schedule(epoch: int, base_lr: float = BASE_LR, step: int = LR_STEP, gamma: float = LR_GAMMA) -> float:
    """Step decay: ``base_lr * gamma ** (epoch // step)``."""
    return base_lr * gamma ** (epoch // step)


class Adam:
    def __init__(self, params: list[Param], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.enforce_mask()

    def state_arrays(self):
        return self.m, self.v, self.t
