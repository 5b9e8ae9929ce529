from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class Schedule:
    """Linear warmup to ``peak_lr`` then linear decay to ``final_frac * peak_lr``."""

    peak_lr: float
    total_steps: int
    warmup_frac: float = 0.05
    final_frac: float = 0.0

    def __call__(self, step: int) -> float:
        warm = max(1, int(round(self.warmup_frac * self.total_steps)))
        if step < warm:
            return self.peak_lr * (step + 1) / warm
        span = max(1, self.total_steps - warm)
        frac = min(1.0, (step - warm) / span)
        return self.peak_lr * (1.0 - (1.0 - self.final_frac) * frac)


class Adam:
    """Adam over a named parameter dict, with optional global-norm clipping."""

    def __init__(self, params: dict[str, Tensor], schedule: Schedule, betas=(0.9, 0.98),
                 eps: float = 1e-8, clip_norm: float | None = 5.0, weight_decay: float = 0.0):
        self.params = params
        self.schedule = schedule
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((p.grad * p.grad).sum())
                             for p in self.params.values() if p.grad is not None))

    def step(self) -> float:
        """Apply one update; returns the learning rate used."""
        lr = self.schedule(self.step_count)
        self.step_count += 1
        scale = 1.0
        if self.clip_norm is not None:
            gn = self.grad_norm()
            if gn > self.clip_norm:
                scale = self.clip_norm / gn
        bc1 = 1.0 - self.b1**self.step_count
        bc2 = 1.0 - self.b2**self.step_count
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update
        return lr
