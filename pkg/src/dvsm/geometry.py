"""Camera math: pixel rays, Plücker maps, pose normalisation, view selection.

Conventions: OpenCV-style cameras (x right, y down, looking along +z), poses
are world-from-camera 4x4 rigid transforms, pixel centres sit at half-integer
coordinates.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .tensor import bilinear_resize


@dataclass(frozen=True)
class Camera:
    pose: np.ndarray          # [4, 4] world-from-camera
    intrinsics: np.ndarray    # [3, 3]
    width: int
    height: int
    frame: str | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "pose", np.asarray(self.pose, dtype=np.float64).reshape(4, 4))
        object.__setattr__(self, "intrinsics", np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3))

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3]

    @property
    def forward(self) -> np.ndarray:
        return self.pose[:3, 2]

    def validate(self, atol: float = 1e-6) -> None:
        R = self.rotation
        if not np.allclose(R.T @ R, np.eye(3), atol=atol) or np.linalg.det(R) <= 0:
            raise ValueError("camera rotation is not a proper orthonormal matrix")
        K = self.intrinsics
        fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
        if fx <= 0 or fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={fx}, fy={fy}")
        if not (0 < cx < self.width and 0 < cy < self.height):
            raise ValueError("principal point outside the image")
        if abs(K[0, 1]) > 0 or np.any(K[2] != [0, 0, 1]):
            raise ValueError("intrinsics must be zero-skew upper triangular")

    def resized(self, width: int, height: int) -> "Camera":
        """Same camera with intrinsics rescaled to a new pixel grid."""
        sx, sy = width / self.width, height / self.height
        K = self.intrinsics.copy()
        K[0] *= sx
        K[1] *= sy
        return replace(self, intrinsics=K, width=int(width), height=int(height))

    def to_json(self) -> dict:
        return {"pose": self.pose.reshape(-1).tolist(), "intrinsics": self.intrinsics.reshape(-1).tolist(),
                "width": self.width, "height": self.height}

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(np.array(d["pose"], dtype=np.float64), np.array(d["intrinsics"], dtype=np.float64),
                   int(d["width"]), int(d["height"]))


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-from-camera pose at ``eye`` looking at ``target`` (image y points
    away from ``up``)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = x, y, z, eye
    return pose


def make_intrinsics(width: int, height: int, fov_deg: float = 50.0) -> np.ndarray:
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    return np.array([[f, 0, width / 2], [0, f, height / 2], [0, 0, 1.0]])


def pixel_rays(cam: Camera, H: int | None = None, W: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """World-space ray origins and unit directions through pixel centres.

    ``H``/``W`` default to the camera's own grid; other sizes rescale the
    intrinsics so the field of view is preserved.
    """
    H = cam.height if H is None else H
    W = cam.width if W is None else W
    if (H, W) != (cam.height, cam.width):
        cam = cam.resized(W, H)
    K = cam.intrinsics
    if abs(np.linalg.det(K)) < 1e-12:
        raise np.linalg.LinAlgError("singular intrinsics")
    u, v = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    pix = np.stack([u, v, np.ones_like(u)], axis=-1)
    d_cam = pix @ np.linalg.inv(K).T
    d = d_cam @ cam.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(cam.center, d.shape).copy()
    return o, d


def plucker_map(cam: Camera, H: int | None = None, W: int | None = None) -> np.ndarray:
    """``[H, W, 6]`` map of ``(r_o x r_d, r_d)`` per pixel."""
    o, d = pixel_rays(cam, H, W)
    return np.concatenate([np.cross(o, d), d], axis=-1)


def project(cam: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates ``[..., 2]`` and camera-space depth of world points."""
    pts = np.asarray(points, dtype=np.float64)
    R, t = cam.rotation, cam.center
    pc = (pts - t) @ R
    uvw = pc @ cam.intrinsics.T
    return uvw[..., :2] / uvw[..., 2:3], pc[..., 2]


# -- pose normalisation ----------------------------------------------------------

@dataclass(frozen=True)
class Similarity:
    """``x -> (R x + t) / scale`` applied to camera poses."""

    rigid: np.ndarray   # [4, 4]
    scale: float

    @property
    def tag(self) -> str:
        h = hashlib.sha1(np.round(self.rigid, 12).tobytes() + np.float64(self.scale).tobytes())
        return h.hexdigest()[:16]

    def apply(self, cam: Camera) -> Camera:
        pose = self.rigid @ cam.pose
        pose[:3, 3] /= self.scale
        return replace(cam, pose=pose, frame=self.tag)

    def to_json(self) -> dict:
        return {"rigid": self.rigid.reshape(-1).tolist(), "scale": self.scale}

    @classmethod
    def from_json(cls, d: dict) -> "Similarity":
        return cls(np.array(d["rigid"], dtype=np.float64).reshape(4, 4), float(d["scale"]))


def normalize_poses(context: Sequence[Camera]) -> tuple[list[Camera], Similarity]:
    """Move the first context camera to the identity pose and scale so camera
    centres sit at unit mean distance from their centroid."""
    if not context:
        raise ValueError("need at least one camera")
    rigid = np.linalg.inv(context[0].pose)
    centers = np.array([(rigid @ c.pose)[:3, 3] for c in context])
    spread = float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).mean())
    scale = spread if spread > 1e-12 else 1.0
    T = Similarity(rigid, scale)
    return [T.apply(c) for c in context], T


# -- view selection -------------------------------------------------------------

def _view_features(cameras: Sequence[Camera]) -> np.ndarray:
    return np.array([np.concatenate([c.center, 0.5 * c.forward]) for c in cameras])


@dataclass
class KMeansResult:
    indices: list[int]
    centroids: np.ndarray
    objective_history: list[float]


def kmeans(X: np.ndarray, k: int, seed: int, max_iter: int = 100, tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd's algorithm with k-means++ seeding. Returns centroids, labels and
    the objective after each assignment step."""
    rng = np.random.default_rng(seed)
    n = len(X)
    centroids = [X[rng.integers(n)]]
    for _ in range(1, k):
        d2 = ((X[:, None, :] - np.array(centroids)[None]) ** 2).sum(-1).min(axis=1)
        total = d2.sum()
        if total <= 0:
            centroids.append(X[rng.integers(n)])
        else:
            centroids.append(X[rng.choice(n, p=d2 / total)])
    C = np.array(centroids, dtype=np.float64)
    history = []
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - C[None]) ** 2).sum(-1)
        labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), labels].sum()))
        newC = C.copy()
        for j in range(k):
            members = X[labels == j]
            if len(members):
                newC[j] = members.mean(axis=0)
        shift = float(np.abs(newC - C).max())
        C = newC
        if shift < tol:
            break
    d2 = ((X[:, None, :] - C[None]) ** 2).sum(-1)
    labels = d2.argmin(axis=1)
    history.append(float(d2[np.arange(n), labels].sum()))
    return C, labels, history


def kmeans_select_views(cameras: Sequence[Camera], k: int, seed: int = 0, return_details: bool = False):
    """Pick ``k`` representative views by clustering camera centre and viewing
    direction; returns indices into ``cameras`` (sorted)."""
    n = len(cameras)
    if not 1 <= k <= n:
        raise ValueError(f"cannot select {k} views from {n}")
    if k == n:
        chosen = list(range(n))
        return KMeansResult(chosen, _view_features(cameras), [0.0]) if return_details else chosen
    X = _view_features(cameras)
    C, _, history = kmeans(X, k, seed)
    chosen: list[int] = []
    for c in C:
        j = int(((X - c) ** 2).sum(-1).argmin())
        if j not in chosen:
            chosen.append(j)
    while len(chosen) < k:
        # farthest-point backfill for centroids that collapsed onto one member
        d = ((X[:, None, :] - X[chosen][None]) ** 2).sum(-1).min(axis=1)
        d[chosen] = -1.0
        chosen.append(int(d.argmax()))
    chosen = sorted(chosen)
    return KMeansResult(chosen, C, history) if return_details else chosen


@dataclass(frozen=True)
class SamplerConfig:
    context_count: int = 2
    skip_range: tuple[int, int] = (1, 16)
    target_count: int = 1
    target_margin: int = 2


def sample_context_target(n: int, cfg: SamplerConfig, seed, start: int | None = None) -> tuple[list[int], list[int]]:
    """Context frames with random per-gap skips, targets drawn from
    ``[min(C) - margin, max(C) + margin] - C`` clamped to ``[0, n)``."""
    lo, hi = cfg.skip_range
    if lo < 1 or hi < lo or cfg.context_count < 1:
        raise ValueError(f"invalid sampler configuration {cfg}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    # shrink the skip ceiling until the context span fits in the sequence
    hi_eff = hi
    while hi_eff > lo and (cfg.context_count - 1) * hi_eff >= n:
        hi_eff -= 1
    gaps = rng.integers(lo, hi_eff + 1, size=cfg.context_count - 1)
    span = int(gaps.sum())
    if span >= n:
        raise ValueError(f"{cfg.context_count} context views with skips >= {lo} do not fit in {n} frames")
    if start is None:
        start = int(rng.integers(0, n - span))
    elif start + span >= n:
        raise ValueError(f"start {start} + span {span} exceeds {n} frames")
    context = [start] + [start + int(s) for s in np.cumsum(gaps)]
    lo_t = max(0, context[0] - cfg.target_margin)
    hi_t = min(n - 1, context[-1] + cfg.target_margin)
    cset = set(context)
    candidates = [i for i in range(lo_t, hi_t + 1) if i not in cset]
    if len(candidates) < cfg.target_count:
        raise ValueError(f"only {len(candidates)} target candidates for {cfg.target_count} targets")
    targets = sorted(int(t) for t in rng.choice(candidates, size=cfg.target_count, replace=False))
    return context, targets


# -- stage-wise patch sizing ------------------------------------------------------

def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def receptive_size(H: int, W: int, p: int, q: int) -> tuple[int, int]:
    if p < 1 or q < 1:
        raise ValueError("patch sizes must be >= 1")
    h, w = round_half_away(H / p) * q, round_half_away(W / p) * q
    if h == 0 or w == 0:
        raise ValueError(f"{H}x{W} with patch {p} rounds to an empty token grid")
    return h, w


def receptive_resize(img, p: int, q: int):
    """Resize ``[..., C, H, W]`` so a ``q`` patchifier yields the token grid a
    ``p`` patchifier would yield on the original."""
    H, W = img.shape[-2:]
    h, w = receptive_size(H, W, p, q)
    return bilinear_resize(img, h, w)


def cameras_to_json(cameras: Sequence[Camera]) -> str:
    return json.dumps([c.to_json() for c in cameras], indent=1)


def cameras_from_json(text: str) -> list[Camera]:
    return [Camera.from_json(d) for d in json.loads(text)]
