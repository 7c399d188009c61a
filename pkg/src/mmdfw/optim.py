"""Minimal Adam used by every inner loop (LMO, MAP, SVGD)."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


class Adam:
    """Elementwise Adam. ``step`` takes a descent direction's negative, i.e. a gradient."""

    def __init__(self, config=None, shape=None):
        self.config = config or AdamConfig()
        self.t = 0
        self.m = None if shape is None else np.zeros(shape)
        self.v = None if shape is None else np.zeros(shape)

    def step(self, x, grad):
        """Return x moved against ``grad``."""
        c = self.config
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * grad * grad
        m_hat = self.m / (1.0 - c.beta1**self.t)
        v_hat = self.v / (1.0 - c.beta2**self.t)
        return x - c.lr * m_hat / (np.sqrt(v_hat) + c.eps)
