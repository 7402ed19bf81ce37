"""AdamW with decoupled weight decay and a cosine learning-rate decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


def cosine_lr(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    """Cosine decay from ``lr_start`` at step 0 to ``lr_end`` at ``total_steps - 1``."""
    if total_steps <= 1:
        return lr_start
    t = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * t))


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


class AdamW:
    """Adam moments plus weight decay applied directly to the parameters.

    ``params`` is a list of ``(name, tensor, decay)`` triples; parameters with
    ``decay=False`` (biases, layer-norm gains) are never shrunk.
    """

    def __init__(self, params, lr_start=5e-3, lr_end=5e-7, total_steps=1, weight_decay=0.01,
                 betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.total_steps = total_steps
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = OptimizerState()
        for name, p, _ in self.params:
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    @property
    def lr(self) -> float:
        return cosine_lr(self.state.step, self.total_steps, self.lr_start, self.lr_end)

    def zero_grad(self):
        for _, p, _ in self.params:
            p.grad = None

    def _check_finite(self):
        for name, p, _ in self.params:
            g = p.grad
            if g is not None and not np.all(np.isfinite(g)):
                bad = int(np.size(g) - np.isfinite(g).sum())
                raise NonFiniteGradientError(
                    f"non-finite gradient in {name!r} at step {self.state.step}: "
                    f"{bad} of {g.size} entries (shape {g.shape})"
                )

    def step(self):
        self._check_finite()
        lr = self.lr
        self.state.step += 1
        t = self.state.step
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p, decay in self.params:
            if decay and self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            g = p.grad
            if g is None:
                continue
            m, v = self.state.m[name], self.state.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
