"""Built-in invariant checks behind ``dvsm selftest``.

Small, fast versions of the properties the test-suite pins down: tape
gradients against finite differences, KV-cache/recompute equivalence,
context permutation invariance and parameter accounting.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .geometry import Camera, look_at, make_intrinsics, normalize_poses
from .model import (
    DECOUPLE_FLAGS,
    ModelConfig,
    count_params,
    reconstruct,
    render,
    render_recompute_oracle,
)
from .tensor import Tensor, attention, gelu, grad_check, layer_norm, softmax


def ring_cameras(n: int, res: int, radius: float = 3.0, phase: float = 0.0) -> list[Camera]:
    cams = []
    for i in range(n):
        a = phase + 2 * np.pi * i / n
        eye = radius * np.array([np.cos(a), 0.5, np.sin(a)])
        cams.append(Camera(look_at(eye, [0.0, 0.0, 0.0]), make_intrinsics(res, res), res, res))
    return cams


def micro_problem(cfg: ModelConfig, V: int = 2, res: int = 8, seed: int = 0, dtype=np.float32, spread: float = 0.3):
    """Weights, context images, normalised context cameras and a target camera.

    ``spread`` adds noise to every parameter so no path is degenerate at init.
    """
    from .train import init_weights

    rng = np.random.default_rng(seed)
    cams = ring_cameras(V + 1, res, phase=rng.uniform(0, 2 * np.pi))
    ctx, T = normalize_poses(cams[:V])
    target = T.apply(cams[V])
    imgs = rng.uniform(size=(V, 3, res, res)).astype(dtype)
    W = init_weights(cfg, seed, dtype=dtype)
    for p in W.params.values():
        p.data = (p.data + rng.normal(scale=spread, size=p.shape)).astype(dtype)
    return W, imgs, ctx, target


def random_micro_config(rng: np.random.Generator, flags=None, rcv=None) -> ModelConfig:
    D = int(rng.choice([8, 16]))
    heads = int(rng.choice([h for h in (1, 2, 4) if D % h == 0]))
    if flags is None:
        flags = [f for f in DECOUPLE_FLAGS if rng.uniform() < 0.3]
    return ModelConfig(D=D, L=int(rng.integers(1, 3)), heads=heads, p1=int(rng.choice([2, 4])),
                       p2=int(rng.choice([2, 4])), decouple=frozenset(flags),
                       recon_cross_view=bool(rng.uniform() < 0.7) if rcv is None else rcv,
                       block_variant=str(rng.choice(["full", "no_mid_ffn", "no_intra"])))


def _primitive_grads() -> float:
    rng = np.random.default_rng(0)
    t = lambda *s: Tensor(rng.normal(size=s), requires_grad=True, dtype=np.float64)
    worst = 0.0
    x, g, b = t(3, 5), t(5), t(5)
    worst = max(worst, grad_check(lambda x, g, b: (layer_norm(x, g, b) ** 2).sum(), [x, g, b]))
    x = t(4, 6)
    worst = max(worst, grad_check(lambda x: (softmax(x) * np.arange(6)).sum(), [x]))
    worst = max(worst, grad_check(lambda x: (gelu(x) ** 2).sum(), [x]))
    q, k, v, s = t(2, 3, 4), t(2, 5, 4), t(2, 5, 4), t(2)
    worst = max(worst, grad_check(lambda q, k, v, s: (attention(q, k, v, s) ** 2).sum(), [q, k, v, s]))
    return worst


def _micro_model_grad() -> float:
    cfg = ModelConfig(D=8, L=1, heads=2, p1=2, p2=2)
    W, imgs, ctx, target = micro_problem(cfg, dtype=np.float64)
    for p in W.params.values():
        p.requires_grad = True
    names = sorted(W.params)
    x = Tensor(imgs, requires_grad=True)
    fn = lambda x, *ps: (render(reconstruct(x, ctx, W), target, W) ** 2).mean()
    return grad_check(fn, [x] + [W[n] for n in names], max_elements=12)


def _cache_equivalence(n: int = 10) -> float:
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(n):
        cfg = random_micro_config(rng)
        W, imgs, ctx, target = micro_problem(cfg, V=int(rng.integers(1, 4)), seed=i)
        a = render(reconstruct(imgs, ctx, W), target, W).data
        worst = max(worst, float(np.abs(a - render_recompute_oracle(imgs, ctx, target, W)).max()))
    return worst


def _permutation(n: int = 5) -> float:
    rng = np.random.default_rng(11)
    worst = 0.0
    for i in range(n):
        cfg = random_micro_config(rng)
        W, imgs, ctx, target = micro_problem(cfg, V=3, seed=i)
        ref = render(reconstruct(imgs, ctx, W), target, W).data
        perm = rng.permutation(3)
        out = render(reconstruct(imgs[perm], [ctx[j] for j in perm], W), target, W).data
        worst = max(worst, float(np.abs(out - ref).max()))
    return worst


def _param_count() -> float:
    from .train import init_weights

    cfg = ModelConfig(D=8, L=1, heads=2, p1=2, p2=2)
    return float(abs(count_params(cfg)[0] - init_weights(cfg, 0).size()) + abs(count_params(cfg)[0] - 2024))


CHECKS: list[tuple[str, Callable[[], float], float]] = [
    ("primitive gradients (rel err)", _primitive_grads, 1e-6),
    ("micro-model gradient (rel err)", _micro_model_grad, 1e-4),
    ("kv-cache vs recompute (max abs)", _cache_equivalence, 1e-5),
    ("context permutation (max abs)", _permutation, 1e-5),
    ("parameter count (abs diff)", _param_count, 0.0),
]


def run_selftest(log: Callable[[str], None] = print) -> int:
    failures = 0
    for name, fn, tol in CHECKS:
        value = fn()
        ok = value <= tol
        failures += not ok
        log(f"{'PASS' if ok else 'FAIL'}  {name}: {value:.3g} (tol {tol:g})")
    return failures
