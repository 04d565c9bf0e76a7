"""Adam with bias correction."""

from __future__ import annotations

import numpy as np

from .core import Tensor


class Adam:
    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got ({beta1}, {beta2})")
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.epsilon = lr, beta1, beta2, epsilon
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        """Apply one update from the populated ``.grad`` buffers, then clear them."""
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise RuntimeError(f"parameter {i} {p.shape} has no gradient; call backward() first")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            np.multiply(g, g, out=g)  # grad buffer is discarded below
            g *= 1.0 - self.beta2
            v += g
            if self.lr:
                denom = np.divide(v, bc2, out=g)
                np.sqrt(denom, out=denom)
                denom += self.epsilon
                step = m * (self.lr / bc1)
                step /= denom
                p.data -= step
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
