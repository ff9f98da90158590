"""Image metrics, held-out evaluation, feature alignment, ablations and timing."""

from __future__ import annotations

import csv
import json
import resource
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .geometry import Camera, kmeans_select_views, normalize_poses
from .model import (
    ModelConfig,
    Trace,
    WeightBundle,
    attended_features,
    count_params,
    forward_concat_baseline,
    load_checkpoint,
    reconstruct,
    render,
)
from .scenes import SceneDataset, target_eligible, write_ppm

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])


# -- metrics -------------------------------------------------------------------------

def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    b = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(pred, gt, max_val: float = 1.0, return_flag: bool = False):
    """``10 log10(max_val^2 / MSE)``; zero error is capped at 99 dB and flagged."""
    a, b = _pair(pred, gt)
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        value, capped = PSNR_CAP, True
    else:
        value, capped = min(PSNR_CAP, 10.0 * np.log10(max_val ** 2 / err)), False
    return (value, capped) if return_flag else value


def to_luma(img: np.ndarray) -> np.ndarray:
    """``[3, H, W]`` RGB to ``[H, W]`` luma; 2-d input passes through."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] == 3:
        return np.tensordot(LUMA, img, axes=(0, 0))
    raise ValueError(f"expected [3, H, W] or [H, W], got {img.shape}")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = len(g)
    x = np.lib.stride_tricks.sliding_window_view(x, n, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(x, n, axis=1) @ g


def ssim(pred, gt, size: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM on luma, Gaussian window, mean over valid windows."""
    a, b = _pair(pred, gt)
    x, y = to_luma(a), to_luma(b)
    if min(x.shape) < size:
        raise ValueError(f"image {x.shape} smaller than the {size}x{size} SSIM window")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    g = gaussian_window(size, sigma)
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


# -- held-out evaluation --------------------------------------------------------------------

@dataclass
class EvalReport:
    per_scene: list[dict]
    aggregate: dict
    config: dict
    timing: dict
    param_count: int
    lpips: float | None = None

    def to_json(self) -> dict:
        return asdict(self)


def select_context(cameras: Sequence[Camera], context_k: int, seed: int) -> tuple[list[int], list[int]]:
    """Every-8th frames as targets, K-means over the rest for the context."""
    targets = target_eligible(len(cameras))
    rest = [i for i in range(len(cameras)) if i not in set(targets)]
    if context_k > len(rest):
        raise ValueError(f"context_k={context_k} exceeds the {len(rest)} non-target frames")
    picked = kmeans_select_views([cameras[i] for i in rest], context_k, seed=seed)
    return [rest[i] for i in picked], targets


Predictor = Callable[[np.ndarray, list, list[int], int], np.ndarray]


class ModelPredictor:
    """Reconstruct once per context set, render each target; keeps timings."""

    def __init__(self, weights: WeightBundle):
        self.weights = weights
        self.recon_seconds: list[float] = []
        self.render_seconds: list[float] = []
        self._key = None
        self._cache = None
        self._transform = None

    def __call__(self, images, cameras, context, target) -> np.ndarray:
        cfg = self.weights.cfg
        # hold the image array itself so identity comparisons stay valid
        key = (images, tuple(context))
        if self._key is None or key[0] is not self._key[0] or key[1] != self._key[1]:
            t0 = time.perf_counter()
            norm, T = normalize_poses([cameras[i] for i in context])
            self._ctx = (images[context], norm)
            self._cache = None
            if cfg.arch_variant == "kv_cache":
                self._cache = reconstruct(images[context], norm, self.weights, transform=T)
            self.recon_seconds.append(time.perf_counter() - t0)
            self._key, self._transform = key, T
        cam = self._transform.apply(cameras[target])
        t0 = time.perf_counter()
        if self._cache is None:
            out = forward_concat_baseline(*self._ctx, cam, self.weights).data
        else:
            out = render(self._cache, cam, self.weights).data
        self.render_seconds.append(time.perf_counter() - t0)
        return out


def mean_context_predictor(images, cameras, context, target) -> np.ndarray:
    """Brute-force baseline: the per-pixel mean of the context images."""
    return images[context].mean(axis=0)


def _as_weights(checkpoint) -> WeightBundle:
    return checkpoint if isinstance(checkpoint, WeightBundle) else load_checkpoint(checkpoint)[0]


def eval_dataset(checkpoint, dataset: SceneDataset, context_k: int, seed: int = 0, resolution: int | None = None,
                 out_dir=None, predictor: Predictor | None = None, split: str = "test") -> EvalReport:
    """Evaluate every scene of ``split`` on its every-8th frames.

    ``predictor`` replaces the network (e.g. the ground truth or the
    context-mean baseline); by default the checkpoint's model is used.
    """
    weights = _as_weights(checkpoint) if checkpoint is not None else None
    res = resolution or max(dataset.resolutions)
    model = predictor is None
    if model:
        predictor = ModelPredictor(weights)
    per_scene = []
    out = Path(out_dir) if out_dir is not None else None
    for sid in dataset.split[split]:
        cams, imgs = dataset.load(sid, res)
        context, targets = select_context(cams, context_k, seed)
        if set(context) & set(targets):
            raise RuntimeError(f"scene {sid}: a target frame leaked into the context")
        ps, ss, capped = [], [], False
        for t in targets:
            pred = np.clip(predictor(imgs, cams, context, t), 0.0, 1.0)
            p, c = psnr(pred, imgs[t], return_flag=True)
            ps.append(p)
            capped |= c
            ss.append(ssim(pred, imgs[t]))
            if out is not None:
                write_ppm(out / f"scene_{sid}" / f"render_{t}.ppm", pred)
        per_scene.append({"scene": sid, "psnr_db": float(np.mean(ps)), "ssim": float(np.mean(ss)),
                          "psnr_capped": capped, "context": context, "targets": targets})
    aggregate = {"psnr_db": float(np.mean([s["psnr_db"] for s in per_scene])),
                 "ssim": float(np.mean([s["ssim"] for s in per_scene])),
                 "psnr_capped": any(s["psnr_capped"] for s in per_scene), "scenes": len(per_scene)}
    timing = {"recon_seconds": None, "render_fps": None, "includes_tokenization": True}
    if model and predictor.recon_seconds:
        timing["recon_seconds"] = float(np.mean(predictor.recon_seconds))
        timing["render_fps"] = float(1.0 / np.mean(predictor.render_seconds))
    cfg = weights.cfg.to_dict() if weights is not None else {}
    report = EvalReport(per_scene, aggregate, {"model": cfg, "context_k": context_k, "seed": seed,
                                               "resolution": res, "split": split}, timing,
                        count_params(weights.cfg)[0] if weights is not None else 0)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))
        with (out / "per_scene.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scene", "psnr_db", "ssim", "psnr_capped"])
            for s in per_scene:
                w.writerow([s["scene"], f"{s['psnr_db']:.6f}", f"{s['ssim']:.6f}", int(s["psnr_capped"])])
    return report


# -- feature alignment -------------------------------------------------------------------------

def token_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity; ``cos(x, x)`` is exactly 1 for nonzero x."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    num = (a * b).sum(-1)
    den = np.sqrt((a * a).sum(-1) * (b * b).sum(-1))
    cos = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return np.clip(cos, -1.0, 1.0)


def pca_rgb(features: np.ndarray) -> np.ndarray:
    """Project token features onto their top 3 principal axes, scaled to [0, 1]."""
    x = features - features.mean(0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    comps = np.zeros((3, x.shape[1]))
    comps[:min(3, len(vt))] = vt[:3]
    y = x @ comps.T
    lo, hi = y.min(0), y.max(0)
    return (y - lo) / np.where(hi > lo, hi - lo, 1.0)


@dataclass
class AlignmentResult:
    rows: list[tuple[int, float, float]]
    cache_digest: str
    csv_path: Path | None = None
    images: list[Path] = field(default_factory=list)


def feature_alignment(checkpoint, cameras: Sequence[Camera], images: np.ndarray, context: Sequence[int],
                      view_index: int, out_dir=None, pca: bool = False, compare=None) -> AlignmentResult:
    """Per-layer cosine similarity between the two branches' attended features
    at context view ``context[view_index]``.

    ``compare`` overrides the rendering branch (``"recon"`` compares the
    reconstruction branch with itself).
    """
    weights = _as_weights(checkpoint)
    cfg = weights.cfg
    if not 0 <= view_index < len(context):
        raise IndexError(f"view_index {view_index} outside the {len(context)} context views")
    norm, T = normalize_poses([cameras[i] for i in context])
    cache = reconstruct(images[list(context)], norm, weights, trace=Trace(capture_features=True), transform=T)
    digest = cache.digest()
    rows, grids = [], []
    for layer in range(cfg.L):
        rec = attended_features(cache, view_index, weights, layer=layer)
        other = rec if compare == "recon" else attended_features(cache, norm[view_index], weights, layer=layer)
        cos = token_cosine(rec, other)
        rows.append((layer, float(cos.mean()), float(cos.std())))
        grids.append((rec, other))
    if cache.digest() != digest:
        raise RuntimeError("cache changed while querying both branches")
    result = AlignmentResult(rows, digest)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.csv_path = out / "alignment.csv"
        with result.csv_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "mean_cos", "std_cos"])
            for layer, m, s in rows:
                w.writerow([layer, f"{m:.9f}", f"{s:.9f}"])
        if pca:
            cam = norm[view_index]
            gh, gw = round(cam.height / cfg.p1), round(cam.width / cfg.p1)
            for layer, (rec, other) in enumerate(grids):
                if other.shape[0] != rec.shape[0]:
                    continue          # token grids differ under stage-wise patch sizes
                rgb = pca_rgb(np.concatenate([rec, other]))
                for name, part in (("recon", rgb[:len(rec)]), ("rend", rgb[len(rec):])):
                    img = part.reshape(gh, gw, 3).transpose(2, 0, 1)
                    img = np.repeat(np.repeat(img, cfg.p1, axis=1), cfg.p1, axis=2)
                    path = out / f"pca_layer{layer}_{name}.ppm"
                    write_ppm(path, img)
                    result.images.append(path)
    return result


# -- ablations ------------------------------------------------------------------------------------

ABLATION_LABELS = {
    "a": "shared", "b": "decouple input_proj", "c": "decouple intra_attn", "d": "decouple cross_qo",
    "e": "decouple ffn", "f": "decouple entire_decoder", "g": "no recon cross-view",
    "h": "no recon cross-view + decouple entire_decoder", "i": "prior frozen", "j": "prior tunable",
    "k": "no ffn in-between", "l": "no intra-view attn",
}


def ablation_configs(base: ModelConfig) -> dict[str, ModelConfig]:
    shared = base.with_(decouple=frozenset(), recon_cross_view=True, block_variant="full", prior="none",
                        prior_tunable=False, arch_variant="kv_cache")
    dec = lambda *f: shared.with_(decouple=frozenset(f))
    return {
        "a": shared, "b": dec("input_proj"), "c": dec("intra_attn"), "d": dec("cross_qo"), "e": dec("ffn"),
        "f": dec("entire_decoder"), "g": shared.with_(recon_cross_view=False),
        "h": dec("entire_decoder").with_(recon_cross_view=False),
        "i": shared.with_(prior="random_featurizer"),
        "j": shared.with_(prior="random_featurizer", prior_tunable=True),
        "k": shared.with_(block_variant="no_mid_ffn"), "l": shared.with_(block_variant="no_intra"),
    }


ABLATION_COLUMNS = ("variant", "params", "psnr", "ssim", "recon_seconds", "render_fps")


def ablation_run(base: ModelConfig, tcfg, dataset: SceneDataset | None, out_dir=None, dry: bool = False,
                 context_k: int = 4, variants: Sequence[str] | None = None) -> list[dict]:
    """Table-1-style sweep under one seed and schedule. ``dry`` only counts
    parameters. All variants are constructed before any training starts."""
    from .train import init_weights, run_training

    configs = ablation_configs(base)
    keys = list(variants) if variants is not None else list(configs)
    unknown = set(keys) - set(configs)
    if unknown:
        raise ValueError(f"unknown ablation variants {sorted(unknown)}")
    for k in keys:
        count_params(configs[k])
        if not dry:
            init_weights(configs[k], tcfg.seed)
    rows = []
    for k in keys:
        row = {"variant": k, "params": count_params(configs[k])[0], "psnr": None, "ssim": None,
               "recon_seconds": None, "render_fps": None}
        if not dry:
            run_dir = Path(out_dir) / f"variant_{k}"
            res = run_training(tcfg, dataset, configs[k], run_dir)
            rep = eval_dataset(res.weights, dataset, context_k, seed=tcfg.seed)
            row.update(psnr=rep.aggregate["psnr_db"], ssim=rep.aggregate["ssim"],
                       recon_seconds=rep.timing["recon_seconds"], render_fps=rep.timing["render_fps"])
        rows.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "ablation.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ABLATION_COLUMNS)
            for r in rows:
                w.writerow(["" if r[c] is None else (f"{r[c]:.6f}" if isinstance(r[c], float) else r[c])
                            for c in ABLATION_COLUMNS])
    return rows


# -- efficiency -------------------------------------------------------------------------------------

def peak_rss_kb() -> int | None:
    """Peak resident set size of this process in KiB, if the platform reports it."""
    try:
        rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    except (AttributeError, OSError):
        return None
    return int(rss // 1024) if sys.platform == "darwin" else int(rss)


def bench(checkpoint, V_list: Sequence[int], resolution: int, runs: int = 5, seed: int = 0, out_dir=None) -> list[dict]:
    """Median-of-``runs`` reconstruction time per context count and
    single-frame render FPS, measured single-threaded after one warm-up."""
    from .scenes import orbit_cameras

    weights = _as_weights(checkpoint)
    rng = np.random.default_rng(seed)
    rows = []
    with threadpool_limits(limits=1):
        for V in V_list:
            cams = orbit_cameras(V + 1, seed, resolution, resolution)
            norm, T = normalize_poses(cams[:V])
            target = T.apply(cams[V])
            imgs = rng.uniform(size=(V, 3, resolution, resolution)).astype(np.float32)
            reconstruct(imgs, norm, weights)
            recon = []
            for _ in range(runs):
                t0 = time.perf_counter()
                cache = reconstruct(imgs, norm, weights)
                recon.append(time.perf_counter() - t0)
            render(cache, target, weights)
            rend = []
            for _ in range(runs):
                t0 = time.perf_counter()
                render(cache, target, weights)
                rend.append(time.perf_counter() - t0)
            rows.append({"V": V, "resolution": resolution, "runs": runs,
                         "recon_seconds": statistics.median(recon), "render_fps": 1.0 / statistics.median(rend),
                         "recon_all": recon, "render_all": rend, "peak_rss_kb": peak_rss_kb()})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "bench.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["V", "resolution", "runs", "recon_seconds", "render_fps", "peak_rss_kb"])
            for r in rows:
                w.writerow([r["V"], r["resolution"], r["runs"], f"{r['recon_seconds']:.6f}",
                            f"{r['render_fps']:.3f}", "" if r["peak_rss_kb"] is None else r["peak_rss_kb"]])
    return rows
