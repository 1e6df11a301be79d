"""First-order optimizers updating lists of numpy parameter arrays in place."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Sgd:
    """SGD with classical momentum.

    Update rule: buf <- momentum * buf + g; p <- p - lr * (buf + weight_decay * p).
    """

    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    _buffers: list[np.ndarray] | None = field(default=None, repr=False)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(grads):
            raise ValueError("params/grads length mismatch")
        if self._buffers is None:
            self._buffers = [np.zeros_like(p) for p in params]
        for p, g, buf in zip(params, grads, self._buffers):
            if p.shape != g.shape:
                raise ValueError(f"shape mismatch: param {p.shape} vs grad {g.shape}")
            buf *= self.momentum
            buf += g
            p -= self.lr * (buf + self.weight_decay * p)


@dataclass
class Adam:
    """Adam with bias correction (eps inside the square root denominator)."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    _m: list[np.ndarray] | None = field(default=None, repr=False)
    _v: list[np.ndarray] | None = field(default=None, repr=False)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(grads):
            raise ValueError("params/grads length mismatch")
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(params, grads, self._m, self._v):
            if p.shape != g.shape:
                raise ValueError(f"shape mismatch: param {p.shape} vs grad {g.shape}")
            if self.weight_decay:
                g = g + self.weight_decay * p
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def make_optimizer(name: str, lr: float, momentum: float = 0.0,
                   weight_decay: float = 0.0):
    if name == "sgd":
        return Sgd(lr=lr, momentum=momentum, weight_decay=weight_decay)
    if name == "adam":
        return Adam(lr=lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")
