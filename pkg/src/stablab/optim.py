"""Adam with decoupled weight decay, global-norm clipping and a warmup+cosine LR."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from stablab import kernels


class NonFiniteGradientError(FloatingPointError):
    """The global gradient norm is NaN or infinite."""


@dataclasses.dataclass(frozen=True)
class LRSchedule:
    peak_lr: float
    warmup_steps: int
    total_steps: int
    min_lr: float = 0.0

    def __post_init__(self):
        if self.warmup_steps < 0 or self.warmup_steps >= self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if self.min_lr > self.peak_lr:
            raise ValueError("min_lr must not exceed peak_lr")

    @classmethod
    def for_run(cls, peak_lr, total_steps, warmup_frac=0.01, min_lr_ratio=0.1):
        warmup = max(1, int(round(warmup_frac * total_steps)))
        warmup = min(warmup, max(total_steps - 1, 0))
        return cls(peak_lr, warmup, total_steps, peak_lr * min_lr_ratio)


def lr_at(schedule: LRSchedule, step: int) -> float:
    """Linear 0 -> peak over warmup, cosine peak -> min afterwards, min past the end."""
    if step < 0:
        raise ValueError("step must be >= 0")
    s = schedule
    if step < s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    if step >= s.total_steps:
        return s.min_lr
    progress = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1.0 + math.cos(math.pi * progress))


def global_norm(grads) -> float:
    return math.sqrt(sum(kernels.sum_squares(g) for g in grads if g is not None))


def clip_global_norm(params, max_norm: float):
    """Rescale the ``.grad`` of every tensor in ``params`` so the global norm is <= ``max_norm``.

    Returns ``(grads, pre_clip_norm)``. Raises :class:`NonFiniteGradientError`
    when the norm is not finite; gradients are then left untouched.
    """
    if not max_norm > 0:
        raise ValueError("max_norm must be > 0")
    params = list(params)
    norm = global_norm(p.grad for p in params)
    if not math.isfinite(norm):
        raise NonFiniteGradientError(f"global gradient norm is {norm}")
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.dtype, copy=False)
    return [p.grad for p in params], norm


@dataclasses.dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    step: int = 0
    m: dict = dataclasses.field(default_factory=dict)
    v: dict = dataclasses.field(default_factory=dict)

    def moments(self, name, like):
        if name not in self.m:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)
        return self.m[name], self.v[name]


def adam_step(named_params: dict, state: OptimizerState, lr: float, no_decay=frozenset()) -> None:
    """One bias-corrected Adam update with decoupled decay, in place.

    Decay (``p -= lr * wd * p``) is applied before the moment update and skipped
    for names in ``no_decay``. Parameters without a gradient are left alone.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in named_params.items():
        g = p.grad
        if g is None:
            continue
        m, v = state.moments(name, p.data)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        data = p.data
        if state.weight_decay and name not in no_decay:
            data = data * (1.0 - lr * state.weight_decay)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (data - lr * update).astype(p.dtype, copy=False)
