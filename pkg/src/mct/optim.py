"""Adam with decoupled weight decay, plus a cosine learning-rate schedule."""
from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .tensor import Parameter


def adam_step(params: Iterable[Parameter], lr: float, t: int, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update at step ``t`` (1-based), in place.

    Weight decay is decoupled: ``p -= lr * weight_decay * p`` before the
    adaptive step.
    """
    if t < 1:
        raise ValueError("adam step counter is 1-based")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p in params:
        g = p.grad
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / bc1
        v_hat = p.adam_v / bc2
        value = p.data
        if weight_decay:
            value = value - lr * weight_decay * value
        p.data = (value - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype, copy=False)


class Adam:
    """Stateful wrapper that owns the step counter for a parameter list."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        self.t += 1
        adam_step(self.params, self.lr if lr is None else lr, self.t, self.betas[0], self.betas[1],
                  self.eps, self.weight_decay)


def cosine_lr(base_lr: float, step: int, total_steps: int, min_lr: float = 0.0) -> float:
    """Cosine decay from ``base_lr`` at step 0 to ``min_lr`` at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step / total_steps, 0.0), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * frac))
