"""Procedural Lambertian sphere scenes with an exact ray-traced ground truth.

Dataset layout on disk::

    <root>/manifest.json
    <root>/scene_<id>/cameras.json
    <root>/scene_<id>/frame_<k>_<res>.ppm
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Camera, look_at, make_intrinsics, pixel_rays

TARGET_EVERY = 8


class DatasetError(RuntimeError):
    """Missing, corrupt or inconsistent dataset files."""


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    albedo: tuple[float, float, float]


@dataclass(frozen=True)
class GroundPlane:
    height: float
    albedo_a: tuple[float, float, float]
    albedo_b: tuple[float, float, float]
    checker_size: float = 0.5


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    spheres: tuple[Sphere, ...]
    light_dir: tuple[float, float, float]
    ambient: float
    background: tuple[float, float, float]
    ground_plane: GroundPlane | None = None

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        gp = d.get("ground_plane")
        return cls(
            seed=int(d["seed"]),
            spheres=tuple(Sphere(tuple(s["center"]), float(s["radius"]), tuple(s["albedo"])) for s in d["spheres"]),
            light_dir=tuple(d["light_dir"]),
            ambient=float(d["ambient"]),
            background=tuple(d["background"]),
            ground_plane=GroundPlane(gp["height"], tuple(gp["albedo_a"]), tuple(gp["albedo_b"]),
                                     gp["checker_size"]) if gp else None,
        )

    def digest(self) -> str:
        return hashlib.sha1(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


def _rgb(rng, lo=0.1, hi=0.95) -> tuple[float, float, float]:
    return tuple(float(x) for x in rng.uniform(lo, hi, size=3))


def generate_scene(seed: int, ground_plane: bool | None = None, n_spheres: tuple[int, int] = (3, 8),
                   max_attempts: int = 2000) -> SceneSpec:
    """Deterministic random scene: non-overlapping spheres inside the unit ball,
    a light direction from the upper hemisphere and an optional checkered floor.

    ``ground_plane=None`` lets the seed decide.
    """
    rng = np.random.default_rng(seed)
    want = int(rng.integers(n_spheres[0], n_spheres[1] + 1))
    spheres: list[Sphere] = []
    attempts = 0
    while len(spheres) < want and attempts < max_attempts:
        attempts += 1
        r = float(rng.uniform(0.15, 0.4))
        c = rng.uniform(-1, 1, size=3)
        if np.linalg.norm(c) + r > 1.0:
            continue
        if any(np.linalg.norm(c - np.array(s.center)) <= r + s.radius for s in spheres):
            continue
        spheres.append(Sphere(tuple(float(x) for x in c), r, _rgb(rng)))
    light = rng.normal(size=3)
    light[1] = abs(light[1]) + 0.5
    light /= np.linalg.norm(light)
    ambient = float(rng.uniform(0.15, 0.35))
    background = _rgb(rng, 0.05, 0.5)
    use_plane = bool(rng.random() < 0.5) if ground_plane is None else ground_plane
    plane = GroundPlane(-1.0, _rgb(rng), _rgb(rng)) if use_plane else None
    return SceneSpec(seed, tuple(spheres), tuple(float(x) for x in light), ambient, background, plane)


def intersect_rays(spec: SceneSpec, origins: np.ndarray, dirs: np.ndarray):
    """Nearest positive hit per ray: distance ``t`` (inf on miss), surface
    normal and albedo, each shaped like the ray batch."""
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(o)
    t_best = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    albedo = np.zeros((n, 3))
    eps = 1e-9
    for s in spec.spheres:
        c = np.asarray(s.center)
        oc = o - c
        b = (oc * d).sum(-1)
        cc = (oc * oc).sum(-1) - s.radius ** 2
        disc = b * b - cc
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > eps, t0, np.where(t1 > eps, t1, np.inf))
        t = np.where(ok, t, np.inf)
        closer = t < t_best
        if closer.any():
            t_best[closer] = t[closer]
            p = o[closer] + t[closer, None] * d[closer]
            normal[closer] = (p - c) / s.radius
            albedo[closer] = s.albedo
    gp = spec.ground_plane
    if gp is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (gp.height - o[:, 1]) / d[:, 1]
        t = np.where((np.abs(d[:, 1]) > 1e-12) & (t > eps), t, np.inf)
        closer = t < t_best
        if closer.any():
            t_best[closer] = t[closer]
            p = o[closer] + t[closer, None] * d[closer]
            parity = (np.floor(p[:, 0] / gp.checker_size) + np.floor(p[:, 2] / gp.checker_size)) % 2
            albedo[closer] = np.where(parity[:, None] == 0, gp.albedo_a, gp.albedo_b)
            normal[closer] = [0.0, 1.0, 0.0]
    return t_best, normal, albedo


def shade(spec: SceneSpec, t: np.ndarray, normal: np.ndarray, albedo: np.ndarray) -> np.ndarray:
    lam = np.clip(normal @ np.asarray(spec.light_dir), 0.0, None)
    rgb = albedo * (spec.ambient + (1.0 - spec.ambient) * lam)[:, None]
    miss = ~np.isfinite(t)
    rgb[miss] = spec.background
    return rgb


def trace_rays(spec: SceneSpec, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Lambertian colour per ray, no shadows or secondary bounces."""
    shape = np.shape(origins)
    rgb = shade(spec, *intersect_rays(spec, origins, dirs))
    return rgb.reshape(shape)


def trace_ray(spec: SceneSpec, origin, direction) -> np.ndarray:
    return trace_rays(spec, np.asarray(origin)[None], np.asarray(direction)[None])[0]


def render_ground_truth(spec: SceneSpec, camera: Camera, H: int | None = None, W: int | None = None) -> np.ndarray:
    """``[3, H, W]`` float32 image in [0, 1], one ray per pixel centre."""
    o, d = pixel_rays(camera, H, W)
    img = trace_rays(spec, o, d)
    return np.ascontiguousarray(img.transpose(2, 0, 1)).astype(np.float32)


# -- PPM I/O -------------------------------------------------------------------

def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """Write a ``[3, H, W]`` image in [0, 1] as binary P6."""
    q = quantize(img).transpose(1, 2, 0)
    H, W = q.shape[:2]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode() + q.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != b"P6":
        raise DatasetError(f"{path}: not a binary PPM (magic {raw[:2]!r})")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PPM header")
        fields.append(raw[start:pos])
    pos += 1
    try:
        W, H, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise DatasetError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise DatasetError(f"{path}: unsupported maxval {maxval}")
    body = raw[pos:pos + 3 * W * H]
    if len(body) != 3 * W * H:
        raise DatasetError(f"{path}: expected {3 * W * H} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(H, W, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


# -- datasets --------------------------------------------------------------------

def orbit_cameras(n: int, seed: int, width: int, height: int, fov_deg: float = 50.0,
                  radius: tuple[float, float] = (2.5, 3.5), elevation_deg: tuple[float, float] = (10.0, 45.0),
                  look_at_point=(0.0, 0.0, 0.0)) -> list[Camera]:
    """Jittered orbit: azimuth sweeps once around the scene while radius and
    elevation drift smoothly inside their ranges."""
    rng = np.random.default_rng(seed)
    phase_r, phase_e = rng.uniform(0, 2 * math.pi, size=2)
    cams = []
    K = make_intrinsics(width, height, fov_deg)
    for k in range(n):
        u = k / n
        az = 2 * math.pi * u + rng.normal(scale=0.15 * math.pi / n)
        r_mid, r_amp = sum(radius) / 2, (radius[1] - radius[0]) / 2
        e_mid, e_amp = sum(elevation_deg) / 2, (elevation_deg[1] - elevation_deg[0]) / 2
        r = r_mid + 0.8 * r_amp * math.sin(2 * math.pi * u + phase_r) + rng.uniform(-0.2, 0.2) * r_amp
        el = math.radians(e_mid + 0.8 * e_amp * math.sin(4 * math.pi * u + phase_e) + rng.uniform(-0.2, 0.2) * e_amp)
        eye = r * np.array([math.cos(el) * math.cos(az), math.sin(el), math.cos(el) * math.sin(az)])
        cams.append(Camera(look_at(eye, look_at_point), K, width, height))
    return cams


def target_eligible(n_frames: int, every: int = TARGET_EVERY) -> list[int]:
    return list(range(0, n_frames, every))


@dataclass
class SceneDataset:
    root: Path
    manifest: dict = field(repr=False)

    @property
    def scene_ids(self) -> list[int]:
        return [s["id"] for s in self.manifest["scenes"]]

    @property
    def resolutions(self) -> list[int]:
        return list(self.manifest["resolutions"])

    @property
    def split(self) -> dict:
        return self.manifest["split"]

    def scene_dir(self, scene_id: int) -> Path:
        return self.root / f"scene_{scene_id}"

    def load(self, scene_id: int, resolution: int | None = None):
        return load_scene(self.scene_dir(scene_id), resolution)

    def spec(self, scene_id: int) -> SceneSpec:
        for s in self.manifest["scenes"]:
            if s["id"] == scene_id:
                return SceneSpec.from_json(s["spec"])
        raise KeyError(scene_id)


def make_dataset(n_scenes: int, frames_per_scene: int, resolutions: Sequence[int], seed: int, out_dir,
                 ground_plane: bool | None = None, test_fraction: float = 0.2) -> SceneDataset:
    """Render ``n_scenes`` orbit sequences at square ``resolutions``.

    Every ``TARGET_EVERY``-th frame is marked target-eligible. When the
    scene count leaves no room for a disjoint test split, the test split
    reuses the training scenes (held-out frames still differ).
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    base = max(resolutions)
    scenes = []
    for sid in range(n_scenes):
        sub_seed = int(np.random.SeedSequence([seed, sid]).generate_state(1)[0])
        spec = generate_scene(sub_seed, ground_plane=ground_plane)
        cams = orbit_cameras(frames_per_scene, sub_seed + 1, base, base)
        sdir = root / f"scene_{sid}"
        sdir.mkdir(exist_ok=True)
        (sdir / "cameras.json").write_text(json.dumps([c.to_json() for c in cams], indent=1))
        for k, cam in enumerate(cams):
            for res in resolutions:
                write_ppm(sdir / f"frame_{k}_{res}.ppm", render_ground_truth(spec, cam, res, res))
        scenes.append({"id": sid, "frames": frames_per_scene, "spec": spec.to_json(),
                       "target_eligible": target_eligible(frames_per_scene)})
    n_test = int(round(n_scenes * test_fraction))
    ids = list(range(n_scenes))
    if n_test == 0 or n_test == n_scenes:
        split = {"train": ids, "test": ids}
    else:
        split = {"train": ids[:-n_test], "test": ids[-n_test:]}
    manifest = {"seed": seed, "n_scenes": n_scenes, "frames_per_scene": frames_per_scene,
                "resolutions": sorted(int(r) for r in resolutions), "target_every": TARGET_EVERY,
                "scenes": scenes, "split": split}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return SceneDataset(root, manifest)


def open_dataset(root) -> SceneDataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise DatasetError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest: {exc}") from exc
    return SceneDataset(root, manifest)


def load_scene(scene_dir, resolution: int | None = None) -> tuple[list[Camera], np.ndarray]:
    """Cameras (rescaled to ``resolution``) and ``[N, 3, R, R]`` float32 images."""
    scene_dir = Path(scene_dir)
    manifest_path = scene_dir.parent / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"no manifest.json next to {scene_dir}")
    manifest = json.loads(manifest_path.read_text())
    resolutions = manifest["resolutions"]
    res = max(resolutions) if resolution is None else int(resolution)
    if res not in resolutions:
        raise DatasetError(f"resolution {res} not in dataset resolutions {resolutions}")
    cam_path = scene_dir / "cameras.json"
    if not cam_path.exists():
        raise DatasetError(f"missing {cam_path}")
    try:
        cams = [Camera.from_json(c) for c in json.loads(cam_path.read_text())]
    except (json.JSONDecodeError, KeyError) as exc:
        raise DatasetError(f"corrupt {cam_path}: {exc}") from exc
    if len(cams) != manifest["frames_per_scene"]:
        raise DatasetError(f"{cam_path} lists {len(cams)} cameras, manifest says {manifest['frames_per_scene']}")
    images = []
    for k in range(len(cams)):
        p = scene_dir / f"frame_{k}_{res}.ppm"
        if not p.exists():
            raise DatasetError(f"missing frame {p}")
        img = read_ppm(p)
        if img.shape != (3, res, res):
            raise DatasetError(f"{p} has shape {img.shape}, expected {(3, res, res)}")
        images.append(img)
    cams = [c if (c.width, c.height) == (res, res) else c.resized(res, res) for c in cams]
    return cams, np.stack(images)
