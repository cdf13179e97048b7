"""Moment-tracked optimizer with decoupled weight decay and linear LR decay."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from s3pet import kernels as K
from s3pet.autodiff import Tensor
from s3pet.errors import DimensionError, NumericError


class AdamW:
    """Decoupled weight decay variant of the adaptive-moment update.

    With ``total_steps`` set, the learning rate decays linearly from its
    initial value toward zero: step t (0-based) runs at
    ``lr * (1 - t / total_steps)``.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        betas: tuple = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        total_steps: Optional[int] = None,
    ):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.total_steps = total_steps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        if not self.total_steps:
            return self.lr
        frac = 1.0 - self.t / self.total_steps
        return self.lr * max(frac, 0.0)

    def step(self, grads: Optional[Sequence[np.ndarray]] = None) -> None:
        """Apply one update from explicit grads, or from each param's grad slot."""
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if len(grads) != len(self.params):
            raise DimensionError(f"{len(grads)} grads for {len(self.params)} params")
        lr_t = self.current_lr()
        self.t += 1
        for p, g, m, v in zip(self.params, grads, self._m, self._v):
            if not np.isfinite(g).all():
                raise NumericError("non-finite gradient in optimizer step")
            K.adamw_update(
                p.data, np.asarray(g, dtype=np.float64), m, v, self.t,
                lr_t, self.beta1, self.beta2, self.eps, self.weight_decay,
            )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
