"""Decoder-only view synthesis network.

One stack of blocks serves both stages. Reconstruction runs posed context
images through it and keeps the keys/values of every cross-view attention
layer (the scene cache); rendering runs camera-only tokens for a novel view
through the same blocks, letting each cross-view layer query the cache.

Parameter names resolve per stage: a name covered by an active decouple flag
is stored twice (``name@recon`` / ``name@rend``), every other name is one
shared tensor.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import Camera, Similarity, plucker_map, receptive_size
from .tensor import (
    ShapeError,
    Tensor,
    attention,
    bilinear_resize,
    concat,
    gelu,
    layer_norm,
    linear,
    patchify,
    reshape,
    sigmoid,
    transpose,
    unpatchify,
)
from .tensor import serialize

DECOUPLE_FLAGS = ("input_proj", "intra_attn", "cross_qo", "ffn", "entire_decoder")
BLOCK_VARIANTS = ("full", "no_mid_ffn", "no_intra")
ARCH_VARIANTS = ("kv_cache", "concat_baseline")
PRIORS = ("none", "random_featurizer", "file")
STAGES = ("recon", "rend")


class ConfigError(ValueError):
    """Invalid model configuration or a weights/config/cache mismatch."""


def fnv1a64(data: bytes) -> str:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


@dataclass(frozen=True)
class ModelConfig:
    D: int = 64
    L: int = 4
    heads: int = 4
    p1: int = 4
    p2: int = 4
    q: int | None = None
    decouple: frozenset = frozenset()
    recon_cross_view: bool = True
    block_variant: str = "full"
    arch_variant: str = "kv_cache"
    prior: str = "none"
    prior_tunable: bool = False
    prior_dim: int = 64
    prior_hidden: int = 32
    prior_seed: int = 0
    prior_file: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "decouple", frozenset(self.decouple))
        if self.D % self.heads:
            raise ConfigError(f"D={self.D} is not divisible by heads={self.heads}")
        for name in ("p1", "p2"):
            if getattr(self, name) not in (2, 4, 8, 16):
                raise ConfigError(f"{name}={getattr(self, name)} must be one of 2, 4, 8, 16")
        unknown = self.decouple - set(DECOUPLE_FLAGS)
        if unknown:
            raise ConfigError(f"unknown decouple flags {sorted(unknown)}")
        if self.block_variant not in BLOCK_VARIANTS:
            raise ConfigError(f"block_variant must be one of {BLOCK_VARIANTS}")
        if self.arch_variant not in ARCH_VARIANTS:
            raise ConfigError(f"arch_variant must be one of {ARCH_VARIANTS}")
        if self.prior not in PRIORS:
            raise ConfigError(f"prior must be one of {PRIORS}")
        if self.arch_variant == "concat_baseline" and self.decouple:
            raise ConfigError("the concatenation baseline runs a single shared network")
        if self.L < 1:
            raise ConfigError("need at least one block")
        if self.prior != "none" and self.patch % 2:
            raise ConfigError("prior featurizer needs an even receptive patch size")
        if self.patch < max(self.p1, self.p2):
            raise ConfigError(f"receptive patch q={self.patch} smaller than p1/p2")

    @property
    def patch(self) -> int:
        """Shared receptive patch size ``q`` of the input projection."""
        return self.q if self.q is not None else max(self.p1, self.p2)

    @property
    def head_dim(self) -> int:
        return self.D // self.heads

    @property
    def has_intra(self) -> bool:
        return self.block_variant != "no_intra"

    @property
    def has_mid_ffn(self) -> bool:
        return self.block_variant == "full"

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["decouple"] = sorted(self.decouple)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys {sorted(extra)}")
        d = dict(d)
        if "decouple" in d:
            d["decouple"] = frozenset(d["decouple"])
        return cls(**d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return fnv1a64(self.canonical_json().encode())

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


# -- parameter layout --------------------------------------------------------------

@dataclass(frozen=True)
class ParamSpec:
    shape: tuple[int, ...]
    groups: frozenset        # decouple flags that duplicate this parameter
    kind: str                # "linear" | "ln_g" | "ln_b" | "gain"


def _attn_params(prefix: str, D: int, h: int, groups: dict[str, Iterable[str]]) -> dict[str, ParamSpec]:
    out = {}
    for n, shape, kind in ((".ln_g", (D,), "ln_g"), (".ln_b", (D,), "ln_b"), (".wq", (D, D), "linear"),
                           (".wk", (D, D), "linear"), (".wv", (D, D), "linear"), (".wo", (D, D), "linear"),
                           (".q_gain", (h,), "gain"), (".k_gain", (h,), "gain")):
        out[prefix + n] = ParamSpec(shape, frozenset(groups.get(n, groups["*"])), kind)
    return out


def _mlp_params(prefix: str, D: int, groups: Iterable[str]) -> dict[str, ParamSpec]:
    g = frozenset(groups)
    return {prefix + ".ln_g": ParamSpec((D,), g, "ln_g"), prefix + ".ln_b": ParamSpec((D,), g, "ln_b"),
            prefix + ".w1": ParamSpec((D, 4 * D), g, "linear"), prefix + ".w2": ParamSpec((4 * D, D), g, "linear")}


def param_layout(cfg: ModelConfig) -> dict[str, ParamSpec]:
    """Base (stage-agnostic) parameter names, shapes and decouple groups."""
    D, q, h = cfg.D, cfg.patch, cfg.heads
    none: frozenset = frozenset()
    layout = {
        "pe_ray": ParamSpec((6 * q * q, D), frozenset({"input_proj"}), "linear"),
        "pe_rgb": ParamSpec((3 * q * q, D), none, "linear"),
        "in_ln.g": ParamSpec((D,), frozenset({"input_proj"}), "ln_g"),
        "in_ln.b": ParamSpec((D,), frozenset({"input_proj"}), "ln_b"),
    }
    if cfg.prior != "none":
        layout["prior.proj"] = ParamSpec((cfg.prior_dim, D), none, "linear")
        if cfg.prior_tunable and cfg.prior == "random_featurizer":
            f = featurizer_shapes(q, cfg.prior_hidden, cfg.prior_dim)
            layout["prior.w1"] = ParamSpec(f["w1"], none, "linear")
            layout["prior.w2"] = ParamSpec(f["w2"], none, "linear")
    ent = "entire_decoder"
    for i in range(cfg.L):
        b = f"blocks.{i}"
        if cfg.has_intra:
            layout.update(_attn_params(b + ".intra", D, h, {"*": ("intra_attn", ent)}))
            if cfg.has_mid_ffn:
                layout.update(_mlp_params(b + ".intra_mlp", D, ("ffn", ent)))
        layout.update(_attn_params(b + ".cross", D, h, {"*": (ent,), ".wq": ("cross_qo", ent),
                                                        ".wo": ("cross_qo", ent)}))
        layout.update(_mlp_params(b + ".cross_mlp", D, ("ffn", ent)))
    layout["head.ln_g"] = ParamSpec((D,), none, "ln_g")
    layout["head.ln_b"] = ParamSpec((D,), none, "ln_b")
    layout["head.w_out"] = ParamSpec((D, 3 * cfg.p2 * cfg.p2), none, "linear")
    return layout


def store_names(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Concrete parameter-store names (with stage suffixes) and shapes."""
    out = {}
    for name, spec in param_layout(cfg).items():
        if spec.groups & cfg.decouple:
            out[f"{name}@recon"] = spec.shape
            out[f"{name}@rend"] = spec.shape
        else:
            out[name] = spec.shape
    return out


def count_params(cfg: ModelConfig) -> tuple[int, dict[str, int]]:
    """Closed-form trainable parameter count with a per-group breakdown."""
    D, L, h, q, p2 = cfg.D, cfg.L, cfg.heads, cfg.patch, cfg.p2
    attn = 4 * D * D + 2 * D + 2 * h
    mlp = 8 * D * D + 2 * D
    if cfg.block_variant == "full":
        block = 2 * attn + 2 * mlp           # 24D^2 + 8D + 4h
    elif cfg.block_variant == "no_mid_ffn":
        block = 2 * attn + mlp
    else:
        block = attn + mlp
    n_mlp = {"full": 2, "no_mid_ffn": 1, "no_intra": 1}[cfg.block_variant]
    parts = {
        "blocks": L * block,
        "pe_ray": 6 * q * q * D,
        "pe_rgb": 3 * q * q * D,
        "input_ln": 2 * D,
        "head": 2 * D + 3 * p2 * p2 * D,
    }
    dec = cfg.decouple
    extra = 0
    if "input_proj" in dec:
        extra += 6 * q * q * D + 2 * D
    if "entire_decoder" in dec:
        extra += L * block
    else:
        if "intra_attn" in dec and cfg.has_intra:
            extra += L * attn
        if "cross_qo" in dec:
            extra += L * 2 * D * D
        if "ffn" in dec:
            extra += L * n_mlp * mlp
    parts["decoupled"] = extra
    if cfg.prior != "none":
        parts["prior_proj"] = cfg.prior_dim * D
        if cfg.prior_tunable and cfg.prior == "random_featurizer":
            f = featurizer_shapes(q, cfg.prior_hidden, cfg.prior_dim)
            parts["prior_featurizer"] = int(np.prod(f["w1"]) + np.prod(f["w2"]))
    return sum(parts.values()), parts


class WeightBundle:
    """Named parameter store with stage-aware lookup."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        expected = store_names(cfg)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))[:5]
            extra = sorted(set(params) - set(expected))[:5]
            raise ConfigError(f"weights do not match config (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"{name}: shape {params[name].shape} != expected {shape}")
        self.cfg = cfg
        self.params = params

    def resolve(self, stage: str, name: str) -> Tensor:
        p = self.params.get(name)
        if p is not None:
            return p
        try:
            return self.params[f"{name}@{stage}"]
        except KeyError:
            raise KeyError(f"no parameter {name!r} for stage {stage!r}") from None

    def resolve_name(self, stage: str, name: str) -> str:
        return name if name in self.params else f"{name}@{stage}"

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def size(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype, requires_grad: bool | None = None) -> "WeightBundle":
        return WeightBundle(self.cfg, {
            k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad if requires_grad is None else requires_grad)
            for k, v in self.params.items()})

    def copy(self) -> "WeightBundle":
        return WeightBundle(self.cfg, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                                       for k, v in self.params.items()})

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: self.params[k].data for k in sorted(self.params)}

    def decay_mask(self) -> dict[str, bool]:
        layout = param_layout(self.cfg)
        return {k: layout[k.split("@")[0]].kind == "linear" for k in self.params}

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"model": self.cfg.to_dict(), "config_hash": self.cfg.config_hash()}
        meta.update(extra_meta or {})
        serialize.save(path, self.state(), meta)

    @classmethod
    def load(cls, path, requires_grad: bool = True) -> tuple["WeightBundle", dict]:
        tensors, meta = serialize.load(path)
        if "model" not in meta:
            raise ConfigError(f"{path}: checkpoint metadata lacks a model config")
        cfg = ModelConfig.from_dict(meta["model"])
        if meta.get("config_hash", cfg.config_hash()) != cfg.config_hash():
            raise ConfigError(f"{path}: config hash mismatch")
        return cls(cfg, {k: Tensor(v, requires_grad=requires_grad) for k, v in tensors.items()}), meta


# -- prior providers ----------------------------------------------------------------

def featurizer_shapes(q: int, hidden: int, out_dim: int) -> dict[str, tuple[int, int]]:
    half = q // 2
    return {"w1": (3 * half * half, hidden), "w2": (4 * hidden, out_dim)}


class RandomFeaturizer:
    """Frozen two-layer strided featurizer: a ``q/2`` patch projection with
    GELU, then a 2x2 patch merge, giving one ``out_dim`` feature per ``q``
    patch. Weights are a pure function of ``seed``."""

    kind = "random_featurizer"

    def __init__(self, q: int, out_dim: int = 64, hidden: int = 32, seed: int = 0, dtype=np.float32):
        if q % 2:
            raise ConfigError("featurizer patch size must be even")
        self.q, self.out_dim, self.hidden = q, out_dim, hidden
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFEA7]))
        shapes = featurizer_shapes(q, hidden, out_dim)
        self.w1 = Tensor((rng.standard_normal(shapes["w1"]) / np.sqrt(shapes["w1"][0])).astype(dtype))
        self.w2 = Tensor((rng.standard_normal(shapes["w2"]) / np.sqrt(shapes["w2"][0])).astype(dtype))

    def __call__(self, images: Tensor, w1: Tensor | None = None, w2: Tensor | None = None) -> Tensor:
        w1 = self.w1 if w1 is None else w1
        w2 = self.w2 if w2 is None else w2
        if w1.dtype != images.dtype:
            w1, w2 = w1.astype(images.dtype), w2.astype(images.dtype)
        *lead, _, H, W = images.shape
        half = self.q // 2
        gh, gw = H // self.q, W // self.q
        x = gelu(linear(patchify(images, half), w1))               # [..., (2gh)(2gw), hidden]
        n = len(lead)
        x = reshape(x, (*lead, gh, 2, gw, 2, self.hidden))
        x = transpose(x, tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
        x = reshape(x, (*lead, gh * gw, 4 * self.hidden))
        return linear(x, w2)


def image_key(image: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(image, dtype=np.float32).tobytes()).hexdigest()


class FilePrior:
    """Precomputed per-patch features keyed by the SHA-1 of the float32 input
    image bytes, stored in the tensor container format."""

    kind = "file"

    def __init__(self, path, q: int, out_dim: int):
        tensors, meta = serialize.load(path)
        self.features = tensors
        self.q, self.out_dim = q, out_dim
        if meta.get("q", q) != q:
            raise ConfigError(f"prior file patch size {meta.get('q')} != model q {q}")

    def lookup(self, images: np.ndarray, tokens: int, dtype) -> Tensor:
        out = []
        for img in images:
            key = image_key(img)
            if key not in self.features:
                raise KeyError(f"no precomputed prior features for image {key[:12]}")
            f = self.features[key]
            if f.shape != (tokens, self.out_dim):
                raise ShapeError(f"prior features {f.shape} do not match token grid ({tokens}, {self.out_dim})")
            out.append(f)
        return Tensor(np.stack(out).astype(dtype))

    @staticmethod
    def write(path, images: np.ndarray, features: np.ndarray, q: int) -> None:
        serialize.save(path, {image_key(img): f for img, f in zip(images, features)}, {"q": q})


@lru_cache(maxsize=16)
def build_prior(cfg: ModelConfig):
    if cfg.prior == "random_featurizer":
        return RandomFeaturizer(cfg.patch, cfg.prior_dim, cfg.prior_hidden, cfg.prior_seed)
    if cfg.prior == "file":
        if not cfg.prior_file:
            raise ConfigError("prior='file' needs prior_file")
        return FilePrior(cfg.prior_file, cfg.patch, cfg.prior_dim)
    return None


# -- tracing ---------------------------------------------------------------------------

@dataclass
class Trace:
    """Operation counters and optional captured attention features."""

    capture_features: bool = False
    counts: Counter = field(default_factory=Counter)
    features: dict = field(default_factory=dict)
    tokens: dict = field(default_factory=dict)

    def linear(self, stage: str, rows: int) -> None:
        self.counts[(stage, "linear_calls")] += 1
        self.counts[(stage, "linear_rows")] += rows

    def attention(self, stage: str, kind: str, queries: int, keys: int) -> None:
        self.counts[(stage, "attention_calls")] += 1
        self.counts[(stage, f"{kind}_attention_calls")] += 1
        self.counts[(stage, "query_tokens")] += queries
        self.counts[(stage, "key_tokens")] += keys

    def stage_counts(self, stage: str) -> dict[str, int]:
        return {k: v for (s, k), v in sorted(self.counts.items()) if s == stage}


class _Ops:
    """Stage-bound helpers that resolve weights and count operations."""

    def __init__(self, weights: WeightBundle, stage: str, trace: Trace | None):
        self.W, self.stage, self.trace = weights, stage, trace
        self.h = weights.cfg.heads

    def p(self, name: str) -> Tensor:
        return self.W.resolve(self.stage, name)

    def lin(self, x: Tensor, name: str) -> Tensor:
        if self.trace is not None:
            self.trace.linear(self.stage, int(np.prod(x.shape[:-1])))
        return linear(x, self.p(name))

    def ln(self, x: Tensor, prefix: str) -> Tensor:
        return layer_norm(x, self.p(prefix + ".ln_g"), self.p(prefix + ".ln_b"))

    def scale(self, prefix: str) -> Tensor:
        return self.p(prefix + ".q_gain") * self.p(prefix + ".k_gain")

    def split(self, x: Tensor) -> Tensor:
        *lead, n, D = x.shape
        k = len(lead)
        x = reshape(x, (*lead, n, self.h, D // self.h))
        return transpose(x, tuple(range(k)) + (k + 1, k, k + 2))

    def merge(self, x: Tensor) -> Tensor:
        *lead, h, n, dh = x.shape
        k = len(lead)
        x = transpose(x, tuple(range(k)) + (k + 1, k, k + 2))
        return reshape(x, (*lead, n, h * dh))

    def attend(self, q: Tensor, k: Tensor, v: Tensor, prefix: str, kind: str) -> Tensor:
        """Attention on already-projected ``[..., n, D]`` operands; returns the
        merged attended features before the output projection."""
        if self.trace is not None:
            groups = int(np.prod(q.shape[:-2])) if q.ndim > 2 else 1
            self.trace.attention(self.stage, kind, groups * q.shape[-2], groups * k.shape[-2])
        return self.merge(attention(self.split(q), self.split(k), self.split(v), self.scale(prefix)))

    def self_attn(self, x: Tensor, prefix: str, kind: str) -> Tensor:
        """Pre-norm residual self-attention within each leading group."""
        h = self.ln(x, prefix)
        out = self.attend(self.lin(h, prefix + ".wq"), self.lin(h, prefix + ".wk"), self.lin(h, prefix + ".wv"),
                          prefix, kind)
        return x + self.lin(out, prefix + ".wo")

    def mlp(self, x: Tensor, prefix: str) -> Tensor:
        h = self.ln(x, prefix)
        return x + self.lin(gelu(self.lin(h, prefix + ".w1")), prefix + ".w2")


# -- tokenizers --------------------------------------------------------------------------

def _ray_tokens(cameras: Sequence[Camera], h: int, w: int, q: int, dtype) -> Tensor:
    rays = np.stack([plucker_map(c, h, w) for c in cameras]).transpose(0, 3, 1, 2)
    return patchify(Tensor(rays.astype(dtype)), q)


def _as_images(images, dtype) -> Tensor:
    if isinstance(images, Tensor):
        return images if images.dtype == dtype else images.astype(dtype)
    return Tensor(np.asarray(images, dtype=dtype))


def embed_recon(images, cameras: Sequence[Camera], weights: WeightBundle, cfg: ModelConfig | None = None,
                trace: Trace | None = None, ray_only: bool = False) -> Tensor:
    """Context tokens ``[V, T, D]``: LayerNorm(ray + rgb [+ prior] embeddings).

    ``ray_only`` drops the colour (and prior) terms; it exists to compare the
    camera path of the two tokenizers.
    """
    cfg = cfg or weights.cfg
    ops = _Ops(weights, "recon", trace)
    dtype = weights.dtype
    imgs = _as_images(images, dtype)
    V, C, H, W = imgs.shape
    if C != 3:
        raise ShapeError(f"expected RGB images, got {C} channels")
    if len(cameras) != V:
        raise ShapeError(f"{V} images but {len(cameras)} cameras")
    for c in cameras:
        if (c.height, c.width) != (H, W):
            raise ShapeError(f"camera grid {c.height}x{c.width} does not match images {H}x{W}")
    q = cfg.patch
    h, w = receptive_size(H, W, cfg.p1, q)
    rays = _ray_tokens(cameras, h, w, q, dtype)
    x = ops.lin(rays, "pe_ray")
    if not ray_only:
        resized = bilinear_resize(imgs, h, w)
        x = x + ops.lin(patchify(resized, q), "pe_rgb")
        prior = build_prior(cfg)
        if prior is not None:
            if prior.kind == "file":
                feats = prior.lookup(imgs.data, x.shape[1], dtype)
            elif cfg.prior_tunable:
                feats = prior(resized, ops.p("prior.w1"), ops.p("prior.w2"))
            else:
                feats = prior(resized)
            x = x + ops.lin(feats, "prior.proj")
    if trace is not None:
        trace.tokens["recon"] = x.shape[1]
    return layer_norm(x, ops.p("in_ln.g"), ops.p("in_ln.b"))


def render_grid(camera: Camera, cfg: ModelConfig) -> tuple[int, int]:
    """Token grid of a rendered view."""
    H, W = camera.height, camera.width
    if H % cfg.p2 or W % cfg.p2:
        raise ShapeError(f"render size {H}x{W} is not divisible by p2={cfg.p2}")
    return H // cfg.p2, W // cfg.p2


def embed_rend(camera: Camera, weights: WeightBundle, cfg: ModelConfig | None = None,
               trace: Trace | None = None) -> Tensor:
    """Novel-view tokens ``[T', D]`` from the query camera alone."""
    cfg = cfg or weights.cfg
    ops = _Ops(weights, "rend", trace)
    render_grid(camera, cfg)
    q = cfg.patch
    h, w = receptive_size(camera.height, camera.width, cfg.p2, q)
    x = ops.lin(_ray_tokens([camera], h, w, q, weights.dtype)[0], "pe_ray")
    if trace is not None:
        trace.tokens["rend"] = x.shape[0]
    return layer_norm(x, ops.p("in_ln.g"), ops.p("in_ln.b"))


# -- scene cache ---------------------------------------------------------------------------

@dataclass
class SceneKVCache:
    keys: list[Tensor]
    values: list[Tensor]
    views: int
    tokens_per_view: int
    config_hash: str
    frame: str | None = None
    transform: Similarity | None = None
    recon_features: dict | None = None

    @property
    def layers(self) -> int:
        return len(self.keys)

    def digest(self) -> str:
        h = hashlib.sha1()
        for k, v in zip(self.keys, self.values):
            h.update(k.data.tobytes())
            h.update(v.data.tobytes())
        return h.hexdigest()

    def detach(self) -> "SceneKVCache":
        return replace(self, keys=[k.detach() for k in self.keys], values=[v.detach() for v in self.values])


def _check_weights(weights: WeightBundle, cfg: ModelConfig) -> None:
    if weights.cfg != cfg:
        raise ConfigError("weights were built for a different model config")


def reconstruct(images, cameras: Sequence[Camera], weights: WeightBundle, cfg: ModelConfig | None = None,
                trace: Trace | None = None, return_hidden: bool = False, transform: Similarity | None = None):
    """Run the context views through the blocks and cache every cross-view K/V.

    The blocks after the last cached K/V do not influence the cache, so they
    run only when ``return_hidden`` is set (returns ``(cache, tokens)``) or
    when features are being captured.
    """
    cfg = cfg or weights.cfg
    _check_weights(weights, cfg)
    if len(cameras) < 1:
        raise ValueError("reconstruction needs at least one view")
    frames = {c.frame for c in cameras}
    if len(frames) > 1:
        raise ConfigError("context cameras are not normalised into one frame")
    ops = _Ops(weights, "recon", trace)
    x = embed_recon(images, cameras, weights, cfg, trace)
    V, T, D = x.shape
    capture = trace is not None and trace.capture_features
    keys, values, feats = [], [], {}
    for i in range(cfg.L):
        b = f"blocks.{i}"
        if cfg.has_intra:
            x = ops.self_attn(x, b + ".intra", "intra")
            if cfg.has_mid_ffn:
                x = ops.mlp(x, b + ".intra_mlp")
        h = ops.ln(x, b + ".cross")
        k = ops.lin(h, b + ".cross.wk")
        v = ops.lin(h, b + ".cross.wv")
        keys.append(reshape(k, (V * T, D)))
        values.append(reshape(v, (V * T, D)))
        if i == cfg.L - 1 and not (return_hidden or capture):
            break
        qr = ops.lin(h, b + ".cross.wq")
        if cfg.recon_cross_view:
            out = ops.attend(reshape(qr, (V * T, D)), keys[-1], values[-1], b + ".cross", "cross")
        else:
            out = reshape(ops.attend(qr, k, v, b + ".cross", "cross"), (V * T, D))
        if capture:
            feats[i] = out.data.copy()
        x = x + reshape(ops.lin(out, b + ".cross.wo"), (V, T, D))
        x = ops.mlp(x, b + ".cross_mlp")
    cache = SceneKVCache(keys, values, V, T, cfg.config_hash(), frame=next(iter(frames)), transform=transform,
                         recon_features=feats if capture else None)
    return (cache, x) if return_hidden else cache


def render_tokens(cache: SceneKVCache, camera: Camera, weights: WeightBundle, cfg: ModelConfig | None = None,
                  trace: Trace | None = None) -> Tensor:
    """Final-layer novel-view tokens ``[T', D]``."""
    cfg = cfg or weights.cfg
    _check_weights(weights, cfg)
    if cache.config_hash != cfg.config_hash():
        raise ConfigError(f"cache built by config {cache.config_hash}, model is {cfg.config_hash()}")
    if cache.layers != cfg.L:
        raise ConfigError(f"cache has {cache.layers} layers, model has {cfg.L}")
    if cache.frame is not None and camera.frame != cache.frame:
        raise ConfigError("query camera is not normalised with the cache's transform")
    ops = _Ops(weights, "rend", trace)
    capture = trace is not None and trace.capture_features
    x = embed_rend(camera, weights, cfg, trace)
    for i in range(cfg.L):
        b = f"blocks.{i}"
        if cfg.has_intra:
            x = ops.self_attn(x, b + ".intra", "intra")
            if cfg.has_mid_ffn:
                x = ops.mlp(x, b + ".intra_mlp")
        h = ops.ln(x, b + ".cross")
        out = ops.attend(ops.lin(h, b + ".cross.wq"), cache.keys[i], cache.values[i], b + ".cross", "cross")
        if capture:
            trace.features[("rend", i)] = out.data.copy()
        x = x + ops.lin(out, b + ".cross.wo")
        x = ops.mlp(x, b + ".cross_mlp")
    return x


def head_logits(x: Tensor, camera: Camera, weights: WeightBundle, cfg: ModelConfig,
                trace: Trace | None = None) -> Tensor:
    """``PixShuf(Linear(LayerNorm(x)))``: the pre-activation ``[3, H, W]`` image."""
    ops = _Ops(weights, "rend", trace)
    patches = ops.lin(layer_norm(x, ops.p("head.ln_g"), ops.p("head.ln_b")), "head.w_out")
    return unpatchify(patches, cfg.p2, camera.height, camera.width)


def decode_head(x: Tensor, camera: Camera, weights: WeightBundle, cfg: ModelConfig,
                trace: Trace | None = None) -> Tensor:
    return sigmoid(head_logits(x, camera, weights, cfg, trace))


def render(cache: SceneKVCache, camera: Camera, weights: WeightBundle, cfg: ModelConfig | None = None,
           trace: Trace | None = None) -> Tensor:
    cfg = cfg or weights.cfg
    return decode_head(render_tokens(cache, camera, weights, cfg, trace), camera, weights, cfg, trace)


def attended_features(cache: SceneKVCache, target, weights: WeightBundle, cfg: ModelConfig | None = None,
                      layer: int = 0) -> np.ndarray:
    """Cross-attention output (before the output projection) at ``layer``.

    ``target`` is either a context view index (reconstruction branch; the
    cache must have been built with feature capture) or a camera (rendering
    branch, queried against the same cached K/V).
    """
    cfg = cfg or weights.cfg
    if not 0 <= layer < cfg.L:
        raise IndexError(f"layer {layer} outside [0, {cfg.L})")
    if isinstance(target, Camera):
        tr = Trace(capture_features=True)
        render_tokens(cache, target, weights, cfg, tr)
        return tr.features[("rend", layer)]
    if cache.recon_features is None:
        raise ValueError("cache was built without feature capture")
    view = int(target)
    if not 0 <= view < cache.views:
        raise IndexError(f"view {view} outside [0, {cache.views})")
    T = cache.tokens_per_view
    return cache.recon_features[layer][view * T:(view + 1) * T]


# -- concatenation baseline -----------------------------------------------------------------

def forward_concat_baseline(images, cameras: Sequence[Camera], camera: Camera, weights: WeightBundle,
                            cfg: ModelConfig | None = None, trace: Trace | None = None) -> Tensor:
    """Context and novel tokens in one sequence; every attention layer sees
    the whole sequence and the head decodes the novel slice."""
    cfg = cfg or weights.cfg
    _check_weights(weights, cfg)
    ops = _Ops(weights, "rend", trace)
    novel = embed_rend(camera, weights, cfg, trace)
    n_novel = novel.shape[0]
    if len(cameras):
        ctx = embed_recon(images, cameras, weights, cfg, trace)
        V, T, D = ctx.shape
        x = concat([reshape(ctx, (V * T, D)), novel], axis=0)
    else:
        x = novel
    for i in range(cfg.L):
        b = f"blocks.{i}"
        if cfg.has_intra:
            x = ops.self_attn(x, b + ".intra", "full")
            if cfg.has_mid_ffn:
                x = ops.mlp(x, b + ".intra_mlp")
        x = ops.self_attn(x, b + ".cross", "full")
        x = ops.mlp(x, b + ".cross_mlp")
    return decode_head(x[x.shape[0] - n_novel:], camera, weights, cfg, trace)


# -- recompute oracle (plain numpy, joint masked sequence) -----------------------------------

def _np_ln(x, g, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _np_gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def render_recompute_oracle(images, cameras: Sequence[Camera], camera: Camera, weights: WeightBundle,
                            cfg: ModelConfig | None = None) -> np.ndarray:
    """Render without a cache: context and novel tokens go through the blocks
    together, and the novel rows attend to freshly computed context K/V via
    an attention mask. Must agree with ``render(reconstruct(...))``."""
    cfg = cfg or weights.cfg
    ctx = embed_recon(images, cameras, weights, cfg).data
    novel = embed_rend(camera, weights, cfg).data
    V, T, D = ctx.shape
    X = np.concatenate([ctx.reshape(V * T, D), novel])
    N, n_ctx = len(X), V * T
    group = np.concatenate([np.repeat(np.arange(V), T), np.full(len(novel), V)])
    is_ctx = np.arange(N) < n_ctx
    h, dh = cfg.heads, cfg.head_dim

    def par(name):
        return {s: weights.resolve(s, name).data for s in STAGES}

    def rowwise(x, name, fn):
        w = par(name)
        out = np.empty(x.shape[:-1] + (fn(x[:1], w["recon"]).shape[-1],), dtype=x.dtype)
        out[is_ctx] = fn(x[is_ctx], w["recon"])
        out[~is_ctx] = fn(x[~is_ctx], w["rend"])
        return out

    def ln(x, prefix):
        g, b = par(prefix + ".ln_g"), par(prefix + ".ln_b")
        out = np.empty_like(x)
        out[is_ctx] = _np_ln(x[is_ctx], g["recon"], b["recon"])
        out[~is_ctx] = _np_ln(x[~is_ctx], g["rend"], b["rend"])
        return out

    def mm(x, name):
        return rowwise(x, name, lambda a, w: a @ w)

    def masked_attention(x, prefix, allowed):
        hx = ln(x, prefix)
        q, k, v = mm(hx, prefix + ".wq"), mm(hx, prefix + ".wk"), mm(hx, prefix + ".wv")
        scale = {s: par(prefix + ".q_gain")[s] * par(prefix + ".k_gain")[s] for s in STAGES}
        out = np.zeros_like(q)
        for j in range(h):
            sl = slice(j * dh, (j + 1) * dh)
            qn = q[:, sl] / (np.linalg.norm(q[:, sl], axis=1, keepdims=True) + 1e-6)
            kn = k[:, sl] / (np.linalg.norm(k[:, sl], axis=1, keepdims=True) + 1e-6)
            s = np.where(is_ctx, scale["recon"][j], scale["rend"][j])[:, None]
            logits = np.where(allowed, s * (qn @ kn.T), -np.inf)
            logits -= logits.max(axis=1, keepdims=True)
            wgt = np.exp(logits)
            wgt /= wgt.sum(axis=1, keepdims=True)
            out[:, sl] = wgt @ v[:, sl]
        return x + mm(out, prefix + ".wo")

    def mlp(x, prefix):
        hx = ln(x, prefix)
        return x + mm(_np_gelu(mm(hx, prefix + ".w1")), prefix + ".w2")

    same_group = group[:, None] == group[None, :]
    ctx_cols = np.broadcast_to(is_ctx[None, :], (N, N))
    if cfg.recon_cross_view:
        cross_allowed = ctx_cols
    else:
        cross_allowed = np.where(is_ctx[:, None], same_group & ctx_cols, ctx_cols)
    for i in range(cfg.L):
        b = f"blocks.{i}"
        if cfg.has_intra:
            X = masked_attention(X, b + ".intra", same_group)
            if cfg.has_mid_ffn:
                X = mlp(X, b + ".intra_mlp")
        X = masked_attention(X, b + ".cross", cross_allowed)
        X = mlp(X, b + ".cross_mlp")
    out = _np_ln(X[n_ctx:], weights.resolve("rend", "head.ln_g").data, weights.resolve("rend", "head.ln_b").data)
    out = out @ weights.resolve("rend", "head.w_out").data
    gh, gw = render_grid(camera, cfg)
    p = cfg.p2
    img = out.reshape(gh, gw, 3, p, p).transpose(2, 0, 3, 1, 4).reshape(3, gh * p, gw * p)
    return 1.0 / (1.0 + np.exp(-img))


def synthesize(images, cameras: Sequence[Camera], camera: Camera, weights: WeightBundle,
               cfg: ModelConfig | None = None, trace: Trace | None = None) -> Tensor:
    """One novel view by whichever architecture the config selects."""
    cfg = cfg or weights.cfg
    if cfg.arch_variant == "concat_baseline":
        return forward_concat_baseline(images, cameras, camera, weights, cfg, trace)
    return render(reconstruct(images, cameras, weights, cfg, trace), camera, weights, cfg, trace)


def load_checkpoint(path) -> tuple[WeightBundle, dict]:
    return WeightBundle.load(Path(path), requires_grad=False)
