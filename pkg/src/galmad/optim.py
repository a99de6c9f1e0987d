"""Adam optimizer with per-epoch learning-rate decay."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError, GradientError

__all__ = ["Adam"]


class Adam:
    """Standard Adam with bias correction over a named parameter set.

    The effective learning rate after ``e`` calls to :meth:`end_epoch` is
    ``learning_rate * epoch_decay_factor ** e``.
    """

    def __init__(self, params: dict[str, Tensor], learning_rate=0.001,
                 beta1=0.9, beta2=0.999, epsilon=1e-8, epoch_decay_factor=1.0):
        if not 0.0 < epoch_decay_factor <= 1.0:
            raise ValueError("epoch_decay_factor must be in (0, 1]")
        self.params = dict(params)
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.epoch_decay_factor = float(epoch_decay_factor)
        self.epochs_completed = 0
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    @property
    def effective_lr(self) -> float:
        return self.learning_rate * self.epoch_decay_factor ** self.epochs_completed

    def step(self) -> None:
        """Apply one Adam update from the gradients currently on the params,
        then clear them (explicit reset contract: no silent accumulation)."""
        self.step_count += 1
        t = self.step_count
        lr = self.effective_lr
        for name, p in self.params.items():
            if p.grad is None:
                raise GradientError(f"parameter '{name}' has no gradient")
            if p.grad.shape != p.data.shape:
                raise DimensionError(
                    f"gradient shape {p.grad.shape} does not match parameter "
                    f"'{name}' shape {p.data.shape}"
                )
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.epsilon)
            p.grad = None

    def end_epoch(self) -> None:
        self.epochs_completed += 1
