"""RMSProp and a reduce-on-plateau learning-rate schedule."""

from __future__ import annotations

import numpy as np


class RMSProp:
    def __init__(self, params: list[np.ndarray], lr: float, rho: float = 0.9, eps: float = 1e-8):
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.sq = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """In-place update of ``params``."""
        for p, g, s in zip(params, grads, self.sq):
            s *= self.rho
            s += (1.0 - self.rho) * g * g
            p -= self.lr * g / (np.sqrt(s) + self.eps)


class PlateauSchedule:
    """Divide the LR by ``factor`` after ``patience`` steps without improvement.

    ``step`` returns False once the plateau has been hit ``max_plateaus``
    times; the LR cut on that last plateau is recorded but never used.
    """

    def __init__(self, optimizer: RMSProp, patience: int, factor: float, max_plateaus: int,
                 min_delta: float = 0.0):
        self.opt = optimizer
        self.patience = patience
        self.factor = factor
        self.max_plateaus = max_plateaus
        self.min_delta = min_delta
        self.best = np.inf
        self.wait = 0
        self.reductions = 0

    def step(self, value: float) -> bool:
        """Record ``value``; return whether to keep going.  ``improved`` is set as a side effect."""
        self.improved = value < self.best - self.min_delta
        if self.improved:
            self.best = value
            self.wait = 0
            return True
        self.wait += 1
        if self.wait < self.patience:
            return True
        self.reductions += 1
        self.opt.lr /= self.factor
        self.wait = 0
        return self.reductions < self.max_plateaus
