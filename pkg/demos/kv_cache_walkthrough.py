"""Reconstruct a scene once, then render many cameras from its KV cache.

Compares every cached render against the full joint-sequence recompute and
shows how rendering cost stays flat while the context grows.

    python3 demos/kv_cache_walkthrough.py
"""

import time

import numpy as np

from dvsm.checks import ring_cameras
from dvsm.geometry import normalize_poses
from dvsm.model import ModelConfig, Trace, reconstruct, render, render_recompute_oracle
from dvsm.train import init_weights

cfg = ModelConfig(D=32, L=2, heads=4, p1=4, p2=4)
weights = init_weights(cfg, seed=0)
rng = np.random.default_rng(0)
res = 32

for V in (1, 2, 4, 8):
    cams = ring_cameras(V + 3, res)
    context, T = normalize_poses(cams[:V])
    images = rng.uniform(size=(V, 3, res, res)).astype(np.float32)

    trace = Trace()
    t0 = time.perf_counter()
    cache = reconstruct(images, context, weights, trace=trace)
    t_recon = time.perf_counter() - t0

    worst, t_render = 0.0, 0.0
    for cam in cams[V:]:
        target = T.apply(cam)
        t0 = time.perf_counter()
        out = render(cache, target, weights, trace=trace).data
        t_render += time.perf_counter() - t0
        oracle = render_recompute_oracle(images, context, target, weights)
        worst = max(worst, float(np.abs(out - oracle).max()))

    rend = trace.stage_counts("rend")
    print(f"V={V}: cache {cache.keys[0].shape} per layer, recon {t_recon * 1e3:.1f} ms, "
          f"3 renders {t_render * 1e3:.1f} ms, render queries {rend['query_tokens']}, "
          f"keys {rend['key_tokens']}, max |cache - recompute| {worst:.1e}")
