"""Initialisation, loss, optimisation step and the curriculum training loop."""

from __future__ import annotations

import csv
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Camera, SamplerConfig, normalize_poses, sample_context_target
from .model import (
    ConfigError,
    ModelConfig,
    RandomFeaturizer,
    WeightBundle,
    build_prior,
    forward_concat_baseline,
    param_layout,
    reconstruct,
    render,
    store_names,
)
from .scenes import SceneDataset, target_eligible
from .tensor import (
    AdamWState,
    LrSchedule,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    adamw_step,
    clip_grad_norm,
    lr_at,
    mse,
    serialize,
    set_finite_check,
)

# named RNG sub-streams
STREAM_INIT = 1
STREAM_SAMPLER = 2

METRIC_COLUMNS = ("step", "phase", "lr", "loss", "mse", "percep", "wallclock_ms")


class TrainError(RuntimeError):
    """Dataset/config incompatibility detected before training starts."""


# -- initialisation ---------------------------------------------------------------

def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_weights(cfg: ModelConfig, seed: int, dtype=np.float32) -> WeightBundle:
    """Truncated-normal(0.02, 2 sigma) linears, unit/zero LayerNorms and
    attention logit scales of sqrt(D/heads).

    Each base parameter draws from its own sub-stream keyed by its name, so
    the two stage copies of a decoupled parameter start out identical.
    """
    layout = param_layout(cfg)
    gain = cfg.head_dim ** 0.25          # q_gain * k_gain = sqrt(D / heads)
    featurizer = build_prior(cfg) if cfg.prior == "random_featurizer" else None
    params = {}
    for name, shape in store_names(cfg).items():
        base = name.split("@")[0]
        kind = layout[base].kind
        if base in ("prior.w1", "prior.w2"):
            value = getattr(featurizer, base.split(".")[1]).data.astype(np.float64)
        elif kind == "linear":
            rng = np.random.default_rng([seed, STREAM_INIT, zlib.crc32(base.encode())])
            value = _trunc_normal(rng, shape, 0.02)
        elif kind == "ln_g":
            value = np.ones(shape)
        elif kind == "ln_b":
            value = np.zeros(shape)
        else:
            value = np.full(shape, gain)
        params[name] = Tensor(value.astype(dtype), requires_grad=True)
    return WeightBundle(cfg, params)


# -- loss ------------------------------------------------------------------------------

def compute_loss(pred: Tensor, gt, lam: float = 0.0, featurizer: RandomFeaturizer | None = None):
    """``MSE + lam * mean squared featurizer distance``.

    Returns ``(loss, {"mse": float, "percep": float})``.
    """
    gt = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=pred.dtype))
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    m = mse(pred, gt)
    if lam == 0.0 or featurizer is None:
        return m, {"mse": m.item(), "percep": 0.0}
    p = mse(featurizer(pred), featurizer(gt).detach())
    return m + lam * p, {"mse": m.item(), "percep": p.item()}


def perceptual_featurizer(cfg: ModelConfig, seed: int = 0) -> RandomFeaturizer:
    """Frozen random featurizer used as the perceptual proxy."""
    q = cfg.patch if cfg.patch % 2 == 0 else 2 * cfg.patch
    return RandomFeaturizer(q, out_dim=64, hidden=32, seed=seed + 7919)


# -- one optimisation step -------------------------------------------------------------

@dataclass
class SceneBatch:
    """Normalised context and target views of one scene."""

    context_images: np.ndarray
    context_cameras: list[Camera]
    target_images: np.ndarray
    target_cameras: list[Camera]


def forward_loss(weights: WeightBundle, batch: Sequence[SceneBatch], lam: float = 0.0,
                 featurizer: RandomFeaturizer | None = None):
    """Mean loss over every target of every scene (call under a tape for grads)."""
    cfg = weights.cfg
    total, n = None, 0
    parts = {"mse": 0.0, "percep": 0.0}
    for sb in batch:
        cache = None
        if cfg.arch_variant == "kv_cache":
            cache = reconstruct(sb.context_images, sb.context_cameras, weights, cfg)
        for img, cam in zip(sb.target_images, sb.target_cameras):
            if cache is None:
                pred = forward_concat_baseline(sb.context_images, sb.context_cameras, cam, weights, cfg)
            else:
                pred = render(cache, cam, weights, cfg)
            loss, comp = compute_loss(pred, img, lam, featurizer)
            total = loss if total is None else total + loss
            parts["mse"] += comp["mse"]
            parts["percep"] += comp["percep"]
            n += 1
    if n == 0:
        raise ValueError("batch contains no targets")
    return total / n, {k: v / n for k, v in parts.items()}


def train_step(weights: WeightBundle, batch: Sequence[SceneBatch], opt: AdamWState, lr: float,
               lam: float = 0.0, featurizer: RandomFeaturizer | None = None, clip: float = 1.0) -> dict:
    """Forward, backward, global-norm clip and one AdamW update.

    Shared parameters collect gradient from both stages on the same tape.
    """
    weights.zero_grad()
    for p in weights.params.values():
        p.requires_grad = True
    tape = Tape()
    # the loss check below catches NaN/Inf; skip the per-op scan on the hot path
    prev = set_finite_check(False)
    try:
        with tape:
            loss, parts = forward_loss(weights, batch, lam, featurizer)
    finally:
        set_finite_check(prev)
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite loss {value} (mse={parts['mse']}, percep={parts['percep']}, "
                             f"optimizer step {opt.step})")
    tape.backward(loss)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in weights.items()}
    norm = clip_grad_norm(grads, clip)
    if not np.isfinite(norm):
        raise NonFiniteError(f"non-finite gradient norm at optimizer step {opt.step}")
    adamw_step(weights.params, grads, opt, lr, weights.decay_mask())
    return {"loss": value, "grad_norm": norm, **parts}


# -- training configuration --------------------------------------------------------------

@dataclass(frozen=True)
class Phase:
    resolution: int
    steps: int


@dataclass(frozen=True)
class TrainConfig:
    curriculum: tuple = (Phase(32, 200),)
    context_counts: tuple = (2, 4, 8)
    skip_range: tuple = (1, 4)
    target_count: int = 1
    target_margin: int = 2
    batch_scenes: int = 1
    peak_lr: float = 1e-3
    warmup: int = 100
    min_lr: float = 1e-5
    lam: float = 0.2
    weight_decay: float = 0.05
    clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    log_wallclock: bool = True

    def __post_init__(self):
        phases = tuple(p if isinstance(p, Phase) else Phase(**p) for p in self.curriculum)
        object.__setattr__(self, "curriculum", phases)
        object.__setattr__(self, "context_counts", tuple(int(c) for c in self.context_counts))
        object.__setattr__(self, "skip_range", tuple(int(s) for s in self.skip_range))
        if not phases:
            raise ConfigError("curriculum is empty")
        if any(p.steps <= 0 for p in phases):
            raise ConfigError("every curriculum phase needs a positive step count")
        if self.lam < 0:
            raise ConfigError("perceptual weight must be >= 0")
        if not self.context_counts or min(self.context_counts) < 1:
            raise ConfigError("context counts must be positive")
        if self.target_count < 1 or self.batch_scenes < 1:
            raise ConfigError("target_count and batch_scenes must be >= 1")

    @property
    def total_steps(self) -> int:
        return sum(p.steps for p in self.curriculum)

    def phase_bounds(self) -> list[int]:
        """Cumulative step counts at which each phase ends."""
        return np.cumsum([p.steps for p in self.curriculum]).tolist()

    def phase_of(self, step: int) -> int:
        """Phase index of the 1-based ``step``."""
        for i, end in enumerate(self.phase_bounds()):
            if step <= end:
                return i
        raise ValueError(f"step {step} beyond the curriculum ({self.total_steps})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["curriculum"] = [asdict(p) for p in self.curriculum]
        d["context_counts"] = list(self.context_counts)
        d["skip_range"] = list(self.skip_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown train config keys {sorted(extra)}")
        return cls(**d)

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.peak_lr, min(self.warmup, self.total_steps), self.total_steps, self.min_lr)


def check_compatible(tcfg: TrainConfig, dataset: SceneDataset, mcfg: ModelConfig) -> None:
    """Fail fast on anything that would otherwise break mid-run."""
    if not dataset.split["train"]:
        raise TrainError("dataset has no training scenes")
    frames = dataset.manifest["frames_per_scene"]
    usable = frames - len(target_eligible(frames))
    need = max(tcfg.context_counts) + tcfg.target_count
    if usable < need:
        raise TrainError(f"{usable} trainable frames per scene, need {need}")
    for ph in tcfg.curriculum:
        if ph.resolution not in dataset.resolutions:
            raise TrainError(f"resolution {ph.resolution} not rendered (dataset has {dataset.resolutions})")
        for p in (mcfg.p1, mcfg.p2):
            if ph.resolution % p:
                raise TrainError(f"resolution {ph.resolution} not divisible by patch {p}")


def sample_batch(rng: np.random.Generator, scenes: dict, tcfg: TrainConfig) -> list[SceneBatch]:
    """Draw scenes, a context count and context/target frames; normalise the
    cameras of each scene into its context frame."""
    ids = sorted(scenes)
    picks = rng.choice(len(ids), size=tcfg.batch_scenes, replace=len(ids) < tcfg.batch_scenes)
    V = int(rng.choice(tcfg.context_counts))
    out = []
    for j in picks:
        cams, imgs, pool = scenes[ids[j]]
        scfg = SamplerConfig(V, tcfg.skip_range, tcfg.target_count, tcfg.target_margin)
        ctx, tgt = sample_context_target(len(pool), scfg, rng)
        ctx = [pool[i] for i in ctx]
        tgt = [pool[i] for i in tgt]
        norm, T = normalize_poses([cams[i] for i in ctx])
        out.append(SceneBatch(imgs[ctx], norm, imgs[tgt], [T.apply(cams[i]) for i in tgt]))
    return out


# -- checkpoints -----------------------------------------------------------------------------

def checkpoint_paths(out_dir, step: int) -> tuple[Path, Path]:
    base = Path(out_dir) / f"ckpt_{step:06d}"
    return base.with_suffix(".dvsm"), base.with_suffix(".opt.dvsm")


def save_checkpoint(out_dir, step: int, weights: WeightBundle, opt: AdamWState, tcfg: TrainConfig) -> Path:
    path, opt_path = checkpoint_paths(out_dir, step)
    weights.save(path, {"step": step, "train": tcfg.to_dict()})
    tensors = {f"m/{k}": v for k, v in opt.m.items()}
    tensors.update({f"v/{k}": v for k, v in opt.v.items()})
    serialize.save(opt_path, tensors, {"step": opt.step, "betas": list(opt.betas),
                                       "weight_decay": opt.weight_decay, "eps": opt.eps})
    return path


def load_optimizer(path) -> AdamWState:
    tensors, meta = serialize.load(path)
    st = AdamWState(step=int(meta["step"]), betas=tuple(meta["betas"]), weight_decay=meta["weight_decay"],
                    eps=meta["eps"])
    for k, v in tensors.items():
        kind, name = k.split("/", 1)
        (st.m if kind == "m" else st.v)[name] = v
    return st


# -- training loop -------------------------------------------------------------------------------

@dataclass
class TrainResult:
    weights: WeightBundle
    metrics_path: Path
    checkpoints: list[Path] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def run_training(tcfg: TrainConfig, dataset: SceneDataset, mcfg: ModelConfig, out_dir,
                 resume: str | Path | None = None, max_steps: int | None = None, log=None) -> TrainResult:
    """Train through the curriculum, writing ``metrics.csv`` and checkpoints.

    Every step draws its batch from a generator seeded by ``(seed, step)``,
    so a resumed run replays exactly the batches of an uninterrupted one.
    ``max_steps`` stops early (the schedule still spans the whole curriculum).
    """
    check_compatible(tcfg, dataset, mcfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    if resume is not None:
        weights, meta = WeightBundle.load(resume)
        if weights.cfg != mcfg:
            raise TrainError("checkpoint was trained with a different model config")
        start = int(meta["step"])
        opt = load_optimizer(Path(str(resume)).with_suffix(".opt.dvsm"))
        rows = metrics_path.read_text().splitlines()[:start + 1] if metrics_path.exists() else []
        if len(rows) != start + 1:
            raise TrainError(f"metrics.csv does not cover the {start} steps of the checkpoint")
        metrics_path.write_text("\n".join(rows) + "\n")
    else:
        weights = init_weights(mcfg, tcfg.seed)
        opt = AdamWState(weight_decay=tcfg.weight_decay)
        start = 0
        metrics_path.write_text(",".join(METRIC_COLUMNS) + "\n")
    featurizer = perceptual_featurizer(mcfg, tcfg.seed) if tcfg.lam > 0 else None
    sched = tcfg.schedule()
    bounds = tcfg.phase_bounds()
    end = tcfg.total_steps if max_steps is None else min(tcfg.total_steps, max_steps)
    result = TrainResult(weights, metrics_path)
    scenes: dict = {}
    loaded_res = None
    t0 = time.perf_counter()
    with metrics_path.open("a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for step in range(start + 1, end + 1):
            phase = tcfg.phase_of(step)
            res = tcfg.curriculum[phase].resolution
            if res != loaded_res:
                scenes = {}
                for sid in dataset.split["train"]:
                    cams, imgs = dataset.load(sid, res)
                    held = set(target_eligible(len(cams)))
                    scenes[sid] = (cams, imgs, [i for i in range(len(cams)) if i not in held])
                loaded_res = res
            rng = np.random.default_rng([tcfg.seed, STREAM_SAMPLER, step])
            batch = sample_batch(rng, scenes, tcfg)
            lr = lr_at(step, sched)
            stats = train_step(weights, batch, opt, lr, tcfg.lam, featurizer, tcfg.clip)
            ms = (time.perf_counter() - t0) * 1000 if tcfg.log_wallclock else 0.0
            writer.writerow([step, phase, _fmt(lr), _fmt(stats["loss"]), _fmt(stats["mse"]),
                             _fmt(stats["percep"]), f"{ms:.0f}"])
            result.losses.append(stats["loss"])
            if log is not None:
                log(step, stats)
            if step in bounds or (tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0):
                fh.flush()
                result.checkpoints.append(save_checkpoint(out, step, weights, opt, tcfg))
    if end not in bounds and not (tcfg.checkpoint_every and end % tcfg.checkpoint_every == 0) and end > start:
        result.checkpoints.append(save_checkpoint(out, end, weights, opt, tcfg))
    return result


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
