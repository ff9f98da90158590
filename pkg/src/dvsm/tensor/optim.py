"""AdamW with decoupled weight decay and a warmup + cosine learning-rate curve."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ShapeError, Tensor


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.05
    eps: float = 1e-8


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamWState,
               lr: float, decay_mask: dict[str, bool] | None = None) -> None:
    """In-place AdamW update of ``params``.

    ``decay_mask[name] = False`` exempts a parameter from weight decay. Missing
    gradients are treated as zeros so every moment advances in lockstep.
    """
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"optimizer moments for {name} do not match parameter {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        theta = p.data
        wd = state.weight_decay if (decay_mask is None or decay_mask.get(name, True)) else 0.0
        if wd:
            theta = theta - lr * wd * theta
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (theta - lr * update).astype(p.dtype, copy=False)


@dataclass(frozen=True)
class LrSchedule:
    peak_lr: float
    warmup_steps: int
    total_steps: int
    min_lr: float = 0.0


def lr_at(step: int, s: LrSchedule) -> float:
    """Linear warmup from 0 to ``peak_lr``, then cosine decay to ``min_lr``."""
    if not 0 <= step <= s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    span = s.total_steps - s.warmup_steps
    if span <= 0:
        return s.peak_lr
    frac = (step - s.warmup_steps) / span
    return s.min_lr + (s.peak_lr - s.min_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping. Reduction runs in sorted-name order.
    """
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        for name in grads:
            grads[name] = grads[name] * np.asarray(scale, dtype=grads[name].dtype)
    return norm
