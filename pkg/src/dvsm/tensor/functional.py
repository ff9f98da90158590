"""Neural-network primitives built on the tape.

The fused ops (``layer_norm``, ``softmax``, ``gelu``, ``l2_normalize`` and the
attention core) carry hand-written backward rules; the rest are compositions
of core ops.
"""

from __future__ import annotations

import math

import numpy as np

from .core import ShapeError, Tensor, _lift, _record, _unbroadcast, matmul, reshape, transpose

_GELU_C = math.sqrt(2.0 / math.pi)


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """Bias-free projection, ``weight`` stored as ``[in, out]``."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight rows {weight.shape}")
    return matmul(x, weight)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layer_norm: last dim {D} vs gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return _record(out, (x, gamma, beta), bw, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    out = xd - xd.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def bw(g):
        gx = g * out
        gx -= out * gx.sum(axis=axis, keepdims=True)
        return (gx,)

    return _record(out, (x,), bw, "softmax")


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    t = x2 * 0.044715
    t += 1.0
    t *= xd
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= xd
    out *= 0.5

    def bw(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3a x^2)
        d = x2 * (3 * 0.044715)
        d += 1.0
        d *= _GELU_C
        d *= 1.0 - t * t
        d *= xd
        d += 1.0 + t
        d *= 0.5
        d *= g
        return (d,)

    return _record(out, (x,), bw, "gelu")


def l2_normalize(x: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / (||x|| + eps)`` over the last axis; the zero vector maps to zero."""
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    s = n + eps
    out = xd / s

    def bw(g):
        gx_dot = (g * xd).sum(axis=-1, keepdims=True)
        safe_n = np.where(n > 0, n, 1.0)
        return (g / s - xd * gx_dot / (s * s * safe_n),)

    return _record(out, (x,), bw, "l2_normalize")


def attention(Q: Tensor, K: Tensor, V: Tensor, qk_scale: Tensor, qk_norm: bool = True) -> Tensor:
    """Full (unmasked) multi-head attention on ``[..., h, n, dh]`` operands.

    Logits are ``qk_scale[h] * <q_hat, k_hat>`` with L2-normalised queries and
    keys; there is no extra ``1/sqrt(dh)`` factor. ``qk_norm=False`` skips the
    normalisation (used only to exercise the raw dot-product path).
    """
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"attention head dims differ: Q{Q.shape} K{K.shape}")
    if Q.shape[-3] != K.shape[-3] or K.shape[-3] != V.shape[-3]:
        raise ShapeError(f"attention head counts differ: Q{Q.shape} K{K.shape} V{V.shape}")
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"attention key/value counts differ: K{K.shape} V{V.shape}")
    h = Q.shape[-3]
    qk_scale = _lift(qk_scale, Q.data)
    if qk_scale.shape != (h,):
        raise ShapeError(f"qk_scale must have shape ({h},), got {qk_scale.shape}")
    if qk_norm:
        Q, K = l2_normalize(Q), l2_normalize(K)
    # scaling the (smaller) query operand is the same product as scaling the logits
    return _softmax_attend(Q * reshape(qk_scale, (h, 1, 1)), K, V)


def _softmax_attend(Q: Tensor, K: Tensor, V: Tensor) -> Tensor:
    """``softmax(Q K^T) V`` as one node, keeping only the probabilities."""
    Qd, Kd, Vd = Q.data, K.data, V.data
    P = Qd @ np.swapaxes(Kd, -1, -2)
    P -= P.max(axis=-1, keepdims=True)
    np.exp(P, out=P)
    P /= P.sum(axis=-1, keepdims=True)
    out = P @ Vd

    def bw(g):
        gv = _unbroadcast(np.swapaxes(P, -1, -2) @ g, V.shape) if V.requires_grad else None
        if not (Q.requires_grad or K.requires_grad):
            return None, None, gv
        # rowsum(P * dP) == rowsum(g * out), which avoids a pass over the n x m block
        dS = g @ np.swapaxes(Vd, -1, -2)
        dS -= (g * out).sum(axis=-1, keepdims=True)
        dS *= P
        gq = _unbroadcast(dS @ Kd, Q.shape) if Q.requires_grad else None
        gk = _unbroadcast(np.swapaxes(dS, -1, -2) @ Qd, K.shape) if K.requires_grad else None
        return gq, gk, gv

    return _record(out, (Q, K, V), bw, "attention")


def patchify(img: Tensor, p: int) -> Tensor:
    """``[..., C, H, W] -> [..., (H/p)(W/p), C*p*p]``; tokens in raster order,
    each token laid out channel-major then row-major inside the patch."""
    *lead, C, H, W = img.shape
    if H % p or W % p:
        raise ShapeError(f"patch size {p} does not divide image extent {H}x{W}")
    gh, gw = H // p, W // p
    n = len(lead)
    x = reshape(img, (*lead, C, gh, p, gw, p))
    axes = tuple(range(n)) + (n + 1, n + 3, n, n + 2, n + 4)
    x = transpose(x, axes)
    return reshape(x, (*lead, gh * gw, C * p * p))


def unpatchify(tokens: Tensor, p: int, H: int, W: int) -> Tensor:
    """Inverse of :func:`patchify` (pixel shuffle)."""
    *lead, T, L = tokens.shape
    if H % p or W % p:
        raise ShapeError(f"patch size {p} does not divide image extent {H}x{W}")
    gh, gw = H // p, W // p
    if T != gh * gw or L % (p * p):
        raise ShapeError(f"cannot unpatchify {tokens.shape} into {H}x{W} with p={p}")
    C = L // (p * p)
    n = len(lead)
    x = reshape(tokens, (*lead, gh, gw, C, p, p))
    axes = tuple(range(n)) + (n + 2, n, n + 3, n + 1, n + 4)
    x = transpose(x, axes)
    return reshape(x, (*lead, C, H, W))


def resize_matrix(n_in: int, n_out: int, dtype=np.float32) -> np.ndarray:
    """Row-stochastic ``[n_out, n_in]`` bilinear weights, half-pixel centres,
    source coordinates clamped at the borders (no antialiasing)."""
    if n_out < 1 or n_in < 1:
        raise ValueError(f"resize extents must be >= 1, got {n_in} -> {n_out}")
    R = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    rows = np.arange(n_out)
    np.add.at(R, (rows, i0), 1.0 - w)
    np.add.at(R, (rows, i1), w)
    return R.astype(dtype)


def bilinear_resize(img, H_out: int, W_out: int) -> Tensor:
    """Bilinear resize of ``[..., C, H, W]`` as two separable linear maps."""
    img = _lift(img)
    H, W = img.shape[-2:]
    if (H, W) == (H_out, W_out):
        return img
    Ry = Tensor(resize_matrix(H, H_out, img.dtype))
    RxT = Tensor(resize_matrix(W, W_out, img.dtype).T)
    return matmul(matmul(Ry, img), RxT)


def mse(a: Tensor, b) -> Tensor:
    d = a - b
    return (d * d).mean()
