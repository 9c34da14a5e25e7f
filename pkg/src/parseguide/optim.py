"""AdamW with decoupled weight decay; moments persist across steps."""

from __future__ import annotations

import numpy as np

from .tensor import Parameter, Tensor, TensorError


class AdamW:
    def __init__(self, params: list[Parameter], lr: float = 1e-5,
                 betas: tuple[float, float] = (0.9, 0.999),
                 weight_decay: float = 0.01, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, grads: dict[str, Tensor]) -> None:
        """One update; ``grads`` maps parameter name to gradient tensor."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p in self.params:
            g = grads[p.name].data if p.name in grads else None
            if g is None:
                raise TensorError(f"missing gradient for parameter {p.name}")
            if g.shape != p.data.shape:
                raise TensorError(
                    f"gradient shape {g.shape} != parameter shape {p.data.shape} for {p.name}")
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data = p.data - self.lr * (mhat / (np.sqrt(vhat) + self.eps)
                                         + self.weight_decay * p.data)


def adamw_step(optimizer: AdamW, grads: dict[str, Tensor]) -> None:
    """Functional alias for a single optimizer step."""
    optimizer.step(grads)
