"""Adam with bias correction. Weight decay is not applied here; L2 enters the loss."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import DimensionError, Tensor


def adam_step(
    params: Sequence[Tensor],
    first: Sequence[np.ndarray],
    second: Sequence[np.ndarray],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    step: int = 1,
) -> None:
    """Update ``params`` in place from their ``.grad`` and the moment buffers."""
    if step < 1:
        raise ValueError("step count starts at 1")
    b1, b2 = betas
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for p, m, v in zip(params, first, second):
        if m.shape != p.shape or v.shape != p.shape:
            raise DimensionError(f"moment shape {m.shape}/{v.shape} vs param {p.shape}")
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        adam_step(self.params, self.m, self.v, self.lr, self.betas, self.eps, self.t)
