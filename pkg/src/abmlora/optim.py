"""Plain gradient descent and decoupled-weight-decay Adam over Tensor2 params."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor2
from .errors import ConfigError


class SGD:
    def __init__(self, params: list[Tensor2], weight_decay: float = 0.0):
        self.params = list(params)
        self.weight_decay = weight_decay

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * p.grad


class AdamW:
    def __init__(self, params: list[Tensor2], weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, params, weight_decay: float = 0.0):
    if name in ("sgd", "gd"):
        return SGD(params, weight_decay)
    if name == "adamw":
        return AdamW(params, weight_decay)
    raise ConfigError(f"unknown optimizer {name!r}; expected sgd or adamw")


def clip_grad_norm(params: list[Tensor2], max_norm: float) -> float:
    """Scale gradients in place so their joint norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(np.sum(p.grad * p.grad) for p in params if p.grad is not None)))
    if total > max_norm > 0:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total
