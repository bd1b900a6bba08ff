"""First-order optimizers.  Frozen tensors are never touched."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ParameterError
from .tensor import Tensor


def _updatable(params: Sequence[Tensor]) -> list[Tensor]:
    return [p for p in params if p.trainable and not p.frozen and p.grad is not None]


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    params = _updatable(params)
    total = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= factor
    return total


class SGD:
    """Gradient descent with heavy-ball momentum."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, momentum: float = 0.9):
        if lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {lr}")
        self.params = _updatable(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.frozen:
                continue
            v *= self.momentum
            v += p.grad
            p.value -= self.lr * v


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {lr}")
        self.params = _updatable(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.frozen:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.value
            p.value -= self.lr * update


def make_optimizer(name: str, params: Sequence[Tensor], lr: float, momentum: float = 0.9,
                   weight_decay: float = 0.0):
    if name == "sgd":
        return SGD(params, lr=lr, momentum=momentum)
    if name == "adam":
        return Adam(params, lr=lr, weight_decay=weight_decay)
    raise ParameterError(f"unknown optimizer {name!r}")
