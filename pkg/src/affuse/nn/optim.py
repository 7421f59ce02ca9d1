from __future__ import annotations

from typing import Iterable

import numpy as np

from ..errors import StateError
from .layers import Parameter


class RMSprop:
    """RMSprop without momentum.

    ms <- decay * ms + (1 - decay) * g^2
    p  <- p - lr * g / (sqrt(ms) + epsilon)
    """

    def __init__(self, params: Iterable[Parameter], learning_rate: float = 1e-4,
                 decay: float = 0.99, epsilon: float = 1e-8):
        if not 0.0 < decay < 1.0:
            raise ValueError(f"decay must lie in (0, 1), got {decay}")
        if epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        self.params = list(params)
        self.learning_rate = learning_rate
        self.decay = decay
        self.epsilon = epsilon
        self.mean_square = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise StateError(f"parameter {getattr(p, 'name', '') or i!r} has no gradient")
        for p, ms in zip(self.params, self.mean_square):
            g = p.grad
            ms *= self.decay
            ms += (1.0 - self.decay) * g * g
            # zero gradient with zero accumulator would be 0/0 when epsilon == 0
            denom = np.sqrt(ms) + self.epsilon
            update = np.divide(g, denom, out=np.zeros_like(g), where=denom > 0)
            p.data -= self.learning_rate * update
        self.zero_grad()

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "decay": self.decay,
            "epsilon": self.epsilon,
            "mean_square": [ms.copy() for ms in self.mean_square],
        }
