"""Adam with a frozen-parameter set, and reduce-on-plateau learning-rate decay."""

from __future__ import annotations

import math

import numpy as np

from dmseg.errors import TrainingDivergedError


class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 frozen=()):
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.frozen = set(frozen)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        bad = [k for k, p in self.params.items()
               if k not in self.frozen and p.grad is not None and not np.all(np.isfinite(p.grad))]
        if bad:
            raise TrainingDivergedError(
                f"non-finite gradients in {len(bad)} parameter(s)",
                {"parameters": bad, "step": self.step_count, "lr": self.lr},
            )
        self.step_count += 1
        t = self.step_count
        corr1 = 1.0 - self.beta1**t
        corr2 = 1.0 - self.beta2**t
        for k, p in self.params.items():
            if k in self.frozen or p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / corr1
            v_hat = self.v[k] / corr2
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class PlateauDecay:
    """Multiply the optimizer's lr by ``factor`` once the monitored loss stagnates.

    An epoch counts as stagnant unless it improves the best loss by more than
    ``min_delta``. After ``patience`` stagnant epochs the lr decays and the
    counter resets; ``cooldown`` epochs after a decay are not counted.
    """

    def __init__(self, optimizer: Adam, factor: float = 0.8, patience: int = 3, min_delta: float = 1e-4,
                 cooldown: int = 0, min_lr: float = 0.0):
        if not 0 < factor < 1:
            raise ValueError("factor must be in (0, 1)")
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.cooldown = cooldown
        self.min_lr = min_lr
        self.best = math.inf
        self.bad_epochs = 0
        self.cooldown_left = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad_epochs = 0
        elif self.cooldown_left > 0:
            self.cooldown_left -= 1
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.optimizer.lr = max(self.optimizer.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
                self.cooldown_left = self.cooldown
        return self.optimizer.lr
