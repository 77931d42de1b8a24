"""AdamW with decoupled weight decay and the one-cycle learning rate.

The schedule ramps linearly from peak/25 to the peak over the warmup
steps, then follows a half cosine down to peak/ (1/final_factor).  The
final learning rate divides by the reciprocal because round decimal
factors are not exact in binary; dividing by the (exact) reciprocal
keeps the endpoint value exact.
"""

from __future__ import annotations

import numpy as np

WARMUP_DIV = 25.0


class NonFiniteGradient(RuntimeError):
    """A parameter saw a NaN/inf gradient; the update was aborted."""

    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter '{name}'")
        self.name = name


def one_cycle_lr(step: int, total_steps: int, peak_lr: float = 0.002,
                 warmup_fraction: float = 0.05,
                 final_lr_factor: float = 1e-4) -> float:
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if not 0.0 < warmup_fraction < 1.0:
        raise ValueError(f"warmup_fraction must be in (0,1), got {warmup_fraction}")
    warmup = max(1, int(round(warmup_fraction * total_steps)))
    low = peak_lr / WARMUP_DIV
    final = peak_lr / (1.0 / final_lr_factor)
    if step < warmup:
        return low + (peak_lr - low) * (step / warmup)
    span = max(1, total_steps - 1 - warmup)
    frac = (step - warmup) / span
    return final + (peak_lr - final) * 0.5 * (1.0 + np.cos(np.pi * frac))


class AdamW:
    """Decoupled-weight-decay Adam over a name -> Tensor parameter map.

    Names in ``no_decay`` (and scalar gates / prototypes passed there by
    the trainer) skip the decay term.  A missing gradient counts as
    zero.
    """

    def __init__(self, params: dict, betas: tuple = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01,
                 no_decay: set = frozenset()):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            g = p.grad
            if g is not None and not np.isfinite(g).all():
                raise NonFiniteGradient(name)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay and name not in self.no_decay:
                p.data -= lr * self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def sgd_step(params: dict, lr: float) -> None:
    """Plain gradient step, used by small fixed-point experiments."""
    for p in params.values():
        if p.grad is not None:
            p.data -= lr * p.grad
