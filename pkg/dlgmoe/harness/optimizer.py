from __future__ import annotations

import math
from collections.abc import Sequence

import numpy as np

from dlgmoe.core.exceptions import ContractError
from dlgmoe.tensor.tensor_model import FloatArray, Tensor


def warmup_lr(step: int, lr: float, warmup_steps: int) -> float:
    """Inverse-sqrt schedule: lr * min(step^-0.5, step * w^-1.5) * w^0.5, peaking at ``lr``.

    Without warmup the rate stays at ``lr``.
    """
    if step < 1:
        raise ContractError("Optimizer steps are counted from 1")
    if warmup_steps == 0:
        return lr
    return lr * min(step**-0.5, step * warmup_steps**-1.5) * math.sqrt(warmup_steps)


def global_grad_norm(params: Sequence[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def clip_grads(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``; returns the norm before clipping."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


class Adam:
    def __init__(
        self,
        params: Sequence[Tensor],
        betas: tuple[float, float] = (0.9, 0.98),
        eps: float = 1e-9,
    ) -> None:
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m: list[FloatArray] = [np.zeros_like(p.data) for p in self.params]
        self.v: list[FloatArray] = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * p.grad
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * p.grad * p.grad
            if lr == 0.0:
                continue
            update = (self.m[i] / bias1) / (np.sqrt(self.v[i] / bias2) + self.eps)
            p.data = p.data - lr * update
