"""AdamW with global-norm gradient clipping."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .nn import Parameter


class AdamW:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4,
                 weight_decay: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: Optional[float] = None):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float(np.sum(p.grad.astype(np.float64) ** 2))
        return float(np.sqrt(total))

    def step(self) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        self.step_count += 1
        norm = self.grad_norm()
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad * scale
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay:
                p.data *= 1 - self.lr * self.weight_decay
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return norm
