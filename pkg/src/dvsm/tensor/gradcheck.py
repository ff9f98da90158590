"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tape, Tensor


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
               max_elements: int | None = None, seed: int = 0) -> float:
    """Worst relative error between tape gradients and central differences.

    The error for each input is ``max|g_tape - g_fd| / max(|g_tape|, |g_fd|)``
    (infinity norms over that input); the maximum over inputs is returned.
    ``max_elements`` subsamples coordinates per input for large tensors.
    Inputs must be float64 leaves with ``requires_grad=True``.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires float64 inputs")
        t.grad = None
    tape = Tape()
    with tape:
        out = fn(*inputs)
    tape.backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, g in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn(*inputs).item()
            flat[i] = orig - eps
            f_minus = fn(*inputs).item()
            flat[i] = orig
            numeric[j] = (f_plus - f_minus) / (2 * eps)
        a = g.reshape(-1)[idx]
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        if scale == 0.0:
            continue
        worst = max(worst, float(np.abs(a - numeric).max() / scale))
    return worst
