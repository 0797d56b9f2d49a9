"""First-order optimizers and learning-rate schedules over leaf tensors.

Updates rebind ``tensor.data`` to a fresh array; arrays cached in earlier graphs are never
mutated.
"""

import logging
import math
from typing import Optional, Sequence

import numpy as np

from ..autodiff import Tensor

logger = logging.getLogger(__name__)


class Optimizer:
    def __init__(self, params: Sequence[Tensor], lr: float):
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        self.params: list[Tensor] = list(params)
        self.lr = lr

    def step(self, grads: Sequence[Tensor]) -> None:
        if len(grads) != len(self.params):
            raise ValueError(f"{len(grads)} gradients for {len(self.params)} parameters")
        for i, (param, g) in enumerate(zip(self.params, grads)):
            param.data = param.data - self._update(i, g.data)

    def _update(self, index: int, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class SGD(Optimizer):
    """Heavy-ball momentum SGD."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self._velocity: dict[int, np.ndarray] = {}

    def _update(self, index, grad):
        v = self._velocity.get(index)
        v = grad.copy() if v is None else self.momentum * v + grad
        self._velocity[index] = v
        return self.lr * v


class Adam(Optimizer):
    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        betas: tuple = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        super().__init__(params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}
        self._t: dict[int, int] = {}

    def _update(self, index, grad):
        t = self._t.get(index, 0) + 1
        m = self.beta1 * self._m.get(index, 0.0) + (1 - self.beta1) * grad
        v = self.beta2 * self._v.get(index, 0.0) + (1 - self.beta2) * grad * grad
        self._t[index], self._m[index], self._v[index] = t, m, v
        m_hat = m / (1 - self.beta1**t)
        v_hat = v / (1 - self.beta2**t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def step_one(self, index: int, grad: Tensor) -> None:
        """Update a single parameter; used when each embedding chunk has its own step."""
        param = self.params[index]
        param.data = param.data - self._update(index, grad.data)


class CosineSchedule:
    def __init__(self, optimizer: Optimizer, total_steps: int, min_lr: float = 0.0):
        self.optimizer = optimizer
        self.base_lr = optimizer.lr
        self.total_steps = max(total_steps, 1)
        self.min_lr = min_lr
        self.steps = 0

    def step(self) -> None:
        self.steps = min(self.steps + 1, self.total_steps)
        cos = 0.5 * (1 + math.cos(math.pi * self.steps / self.total_steps))
        self.optimizer.lr = self.min_lr + (self.base_lr - self.min_lr) * cos


class ExponentialLR:
    def __init__(self, optimizer: Optimizer, gamma: float):
        self.optimizer = optimizer
        self.gamma = gamma

    def step(self) -> None:
        self.optimizer.lr *= self.gamma


class ReduceLROnPlateau:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(
        self,
        optimizer: Optimizer,
        factor: float = 0.5,
        patience: int = 3,
        threshold: float = 1e-4,
        min_lr: float = 1e-6,
    ):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.best: Optional[float] = None
        self.bad_epochs = 0

    def step(self, metric: float) -> None:
        if self.best is None or metric < self.best * (1 - self.threshold):
            self.best = metric
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            new_lr = max(self.optimizer.lr * self.factor, self.min_lr)
            if new_lr < self.optimizer.lr:
                logger.debug(f"Plateau: reducing learning rate to {new_lr:.3g}")
            self.optimizer.lr = new_lr
            self.bad_epochs = 0
