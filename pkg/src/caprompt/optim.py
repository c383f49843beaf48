"""Adam update for lists of autograd leaves."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Node


@dataclass
class OptimState:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 24
    step_count: int = 0
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)

    def step(self, params: dict[str, Node]) -> None:
        """Apply one Adam update to every parameter that holds a gradient.

        Moment buffers that no longer match a parameter's shape (the head
        grows between tasks) are zero-padded along the first axis.
        """
        self.step_count += 1
        t = self.step_count
        for name, p in params.items():
            if p.grad is None:
                continue
            m = self._moment(self.first, name, p.value)
            v = self._moment(self.second, name, p.value)
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None

    @staticmethod
    def _moment(store: dict, name: str, like: np.ndarray) -> np.ndarray:
        buf = store.get(name)
        if buf is None:
            buf = store[name] = np.zeros_like(like)
        elif buf.shape != like.shape:
            grown = np.zeros_like(like)
            grown[: buf.shape[0]] = buf
            buf = store[name] = grown
        return buf
