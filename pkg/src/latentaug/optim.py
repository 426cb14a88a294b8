from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .tensorcore import Tensor


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class AdamW:
    """Adam with decoupled weight decay; updates ``Tensor.data`` of leaves in place."""

    def __init__(self, params: Iterable[Tensor], cfg: AdamWConfig = AdamWConfig()):
        self.params = list(params)
        self.cfg = cfg
        self.lr = cfg.lr
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1 ** self.t
        bc2 = 1 - c.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            # parameters are leaves and never aliased by a live tape between steps
            p.data = p.data * (1 - self.lr * c.weight_decay) - self.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
