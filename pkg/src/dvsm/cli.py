"""``dvsm`` command-line entry point.

Every subcommand takes ``--config run.json`` plus any number of
``--set section.key=value`` overrides (values parse as JSON, falling back to
a plain string) and writes ``config.resolved.json`` into its output
directory. Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .model import ConfigError, ModelConfig

SUBCOMMANDS = ("gen-data", "train", "render", "eval", "ablate", "analyze-features", "bench", "selftest")


class UsageError(Exception):
    """Bad arguments or configuration (exit code 1)."""


# -- run configuration ---------------------------------------------------------------

@dataclass(frozen=True)
class DataConfig:
    path: str = "data"
    n_scenes: int = 1
    frames: int = 64
    resolutions: tuple = (32, 48)
    ground_plane: bool | None = False
    test_fraction: float = 0.2


@dataclass(frozen=True)
class EvalConfig:
    context_k: int = 8
    split: str = "test"
    resolution: int | None = None


def _strict(cls, d: dict, section: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section '{section}' must be an object")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(d) - known)
    if extra:
        raise ConfigError(f"unknown keys in '{section}': {extra}")
    return cls(**d)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: dict = field(default_factory=dict)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    output_dir: str = "runs"

    def train_config(self):
        from .train import TrainConfig

        return TrainConfig.from_dict({**self.train, "seed": self.seed})

    def to_dict(self) -> dict:
        data = {f.name: getattr(self.data, f.name) for f in fields(DataConfig)}
        data["resolutions"] = list(self.data.resolutions)
        train = self.train_config().to_dict()
        train.pop("seed")
        return {"model": self.model.to_dict(), "train": train, "data": data,
                "eval": {f.name: getattr(self.eval, f.name) for f in fields(EvalConfig)},
                "seed": self.seed, "output_dir": self.output_dir}

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError(f"unknown top-level keys: {extra}")
        train = dict(d.get("train", {}))
        if "seed" in train:
            raise ConfigError("set the run-level 'seed'; train.seed is derived from it")
        rc = cls(model=ModelConfig.from_dict(d.get("model", {})), train=train,
                 data=_strict(DataConfig, d.get("data", {}), "data"),
                 eval=_strict(EvalConfig, d.get("eval", {}), "eval"),
                 seed=int(d.get("seed", 0)), output_dir=str(d.get("output_dir", "runs")))
        rc.train_config()   # validate the train section eagerly
        return rc


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise UsageError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    d = json.loads(json.dumps(d))
    for item in overrides:
        path, value = parse_override(item)
        node = d
        for k in path[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise UsageError(f"--set {item}: {k} is not a section")
        node[path[-1]] = value
    return d


def load_run_config(path: str | None, overrides: list[str]) -> RunConfig:
    base: dict = {}
    if path is not None:
        try:
            base = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    return RunConfig.from_dict(apply_overrides(base, overrides))


def threads_from_env() -> int | None:
    raw = os.environ.get("DVSM_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DVSM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("DVSM_THREADS must be >= 1")
    return n


def write_provenance(out_dir, command: str, rc: RunConfig, threads: int | None, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "config": rc.to_dict(), "threads": threads}
    if extra:
        doc.update(extra)
    path = out / "config.resolved.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return path


def default_out(rc: RunConfig, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return Path(rc.output_dir) / f"{command}_{rc.model.config_hash()}_{stamp}"


# -- subcommands ------------------------------------------------------------------------

def cmd_gen_data(args, rc: RunConfig, threads):
    from .scenes import make_dataset

    out = Path(args.out or rc.data.path)
    ds = make_dataset(rc.data.n_scenes, rc.data.frames, rc.data.resolutions, rc.seed, out,
                      ground_plane=rc.data.ground_plane, test_fraction=rc.data.test_fraction)
    write_provenance(out, "gen-data", rc, threads)
    print(f"wrote {len(ds.scene_ids)} scenes x {rc.data.frames} frames to {out}")


def cmd_train(args, rc: RunConfig, threads):
    from .scenes import open_dataset
    from .train import run_training

    ds = open_dataset(args.data or rc.data.path)
    out = Path(args.out) if args.out else default_out(rc, "train")
    write_provenance(out, "train", rc, threads)

    def log(step, stats):
        if step % args.log_every == 0:
            print(f"step {step} loss {stats['loss']:.6f}", flush=True)

    res = run_training(rc.train_config(), ds, rc.model, out, resume=args.resume, max_steps=args.max_steps, log=log)
    print(f"final checkpoint {res.checkpoints[-1] if res.checkpoints else '(none)'}")


def _checkpoint(path, rc: RunConfig, explicit_config: bool):
    from .model import load_checkpoint

    weights, meta = load_checkpoint(path)
    if explicit_config and weights.cfg.config_hash() != rc.model.config_hash():
        raise RuntimeError(f"checkpoint config hash {weights.cfg.config_hash()} does not match "
                           f"the configured model {rc.model.config_hash()}")
    return weights, meta


def cmd_render(args, rc: RunConfig, threads):
    from .evalsuite import psnr
    from .geometry import Camera, kmeans_select_views, normalize_poses
    from .model import reconstruct, render
    from .scenes import load_scene, target_eligible, write_ppm

    weights, _ = _checkpoint(args.checkpoint, rc, args.config is not None)
    cams, imgs = load_scene(args.scene, args.resolution or rc.eval.resolution)
    gt = None
    if args.camera_json:
        cam = Camera.from_json(json.loads(Path(args.camera_json).read_text()))
        exclude = set(target_eligible(len(cams)))
    else:
        if not 0 <= args.camera < len(cams):
            raise IndexError(f"camera index {args.camera} outside [0, {len(cams)})")
        cam, gt = cams[args.camera], imgs[args.camera]
        exclude = set(target_eligible(len(cams))) | {args.camera}
    rest = [i for i in range(len(cams)) if i not in exclude]
    k = args.context_k or rc.eval.context_k
    if k > len(rest):
        raise ValueError(f"context_k={k} exceeds the {len(rest)} available frames")
    context = [rest[i] for i in kmeans_select_views([cams[i] for i in rest], k, seed=rc.seed)]
    norm, T = normalize_poses([cams[i] for i in context])
    cache = reconstruct(imgs[context], norm, weights, transform=T)
    img = render(cache, T.apply(cam), weights).data
    out = Path(args.out)
    write_ppm(out, img)
    write_provenance(out.parent, "render", rc, threads, {"context": context})
    msg = f"wrote {out}"
    if gt is not None:
        msg += f" psnr {psnr(np.clip(img, 0, 1), gt):.3f} dB"
    print(msg)


def cmd_eval(args, rc: RunConfig, threads):
    from .evalsuite import eval_dataset
    from .scenes import open_dataset

    weights, _ = _checkpoint(args.checkpoint, rc, args.config is not None)
    ds = open_dataset(args.data or rc.data.path)
    out = Path(args.out) if args.out else default_out(rc, "eval")
    write_provenance(out, "eval", rc, threads)
    rep = eval_dataset(weights, ds, args.context_k or rc.eval.context_k, seed=rc.seed,
                       resolution=rc.eval.resolution, out_dir=out, split=rc.eval.split)
    print(f"psnr {rep.aggregate['psnr_db']:.3f} dB  ssim {rep.aggregate['ssim']:.4f}  ({rep.aggregate['scenes']} scenes)")


def cmd_ablate(args, rc: RunConfig, threads):
    from .evalsuite import ablation_run
    from .scenes import open_dataset

    out = Path(args.out) if args.out else default_out(rc, "ablate")
    ds = None if args.dry else open_dataset(args.data or rc.data.path)
    write_provenance(out, "ablate", rc, threads)
    variants = args.variants.split(",") if args.variants else None
    rows = ablation_run(rc.model, rc.train_config(), ds, out_dir=out, dry=args.dry,
                        context_k=args.context_k or rc.eval.context_k, variants=variants)
    for r in rows:
        print(f"({r['variant']}) params={r['params']}" + ("" if r["psnr"] is None else
                                                         f" psnr={r['psnr']:.3f} ssim={r['ssim']:.4f}"))


def cmd_analyze(args, rc: RunConfig, threads):
    from .evalsuite import feature_alignment, select_context
    from .scenes import load_scene

    weights, _ = _checkpoint(args.checkpoint, rc, args.config is not None)
    cams, imgs = load_scene(args.scene, args.resolution or rc.eval.resolution)
    context, _ = select_context(cams, args.context_k or rc.eval.context_k, rc.seed)
    out = Path(args.out) if args.out else default_out(rc, "features")
    write_provenance(out, "analyze-features", rc, threads, {"context": context, "view_index": args.view})
    res = feature_alignment(weights, cams, imgs, context, args.view, out_dir=out, pca=args.pca)
    for layer, m, s in res.rows:
        print(f"layer {layer}: mean_cos {m:.4f} std {s:.4f}")
    if args.compare_checkpoint:
        other, _ = _checkpoint(args.compare_checkpoint, rc, False)
        res2 = feature_alignment(other, cams, imgs, context, args.view, out_dir=out / "compare", pca=args.pca)
        gaps = [a[1] - b[1] for a, b in zip(res.rows, res2.rows)]
        (out / "alignment_gap.csv").write_text("layer,gap\n" + "".join(f"{i},{g:.9f}\n" for i, g in enumerate(gaps)))
        print("alignment gap per layer: " + " ".join(f"{g:+.4f}" for g in gaps))


def cmd_bench(args, rc: RunConfig, threads):
    from .evalsuite import bench

    weights, _ = _checkpoint(args.checkpoint, rc, args.config is not None)
    out = Path(args.out) if args.out else default_out(rc, "bench")
    write_provenance(out, "bench", rc, threads)
    views = [int(v) for v in args.views.split(",")]
    res = args.resolution or rc.eval.resolution or max(rc.data.resolutions)
    for r in bench(weights, views, res, runs=args.runs, seed=rc.seed, out_dir=out):
        print(f"V={r['V']}: recon {r['recon_seconds'] * 1000:.1f} ms, render {r['render_fps']:.1f} fps")


def cmd_selftest(args, rc: RunConfig, threads):
    from .checks import run_selftest

    if args.out:
        write_provenance(args.out, "selftest", rc, threads)
    failures = run_selftest(print)
    if failures:
        raise RuntimeError(f"{failures} self-test check(s) failed")


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "render": cmd_render, "eval": cmd_eval,
            "ablate": cmd_ablate, "analyze-features": cmd_analyze, "bench": cmd_bench, "selftest": cmd_selftest}


# -- parser -------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_usage().strip()}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, e.g. model.D=64 (repeatable)")
    p = _Parser(prog="dvsm", description="Decoder-only view synthesis with a KV-cache scene representation.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset")
    s.add_argument("--out", help="dataset directory (default: data.path)")

    s = sub.add_parser("train", parents=[common], help="train through the curriculum")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.add_argument("--max-steps", type=int)
    s.add_argument("--log-every", type=int, default=100)

    s = sub.add_parser("render", parents=[common], help="render one camera of a scene")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scene", required=True, help="scene directory")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--camera", type=int, help="frame index of the query camera")
    g.add_argument("--camera-json", help="camera JSON file")
    s.add_argument("--out", required=True, help="output .ppm")
    s.add_argument("--context-k", type=int)
    s.add_argument("--resolution", type=int)

    s = sub.add_parser("eval", parents=[common], help="evaluate held-out views")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--context-k", type=int)

    s = sub.add_parser("ablate", parents=[common], help="run the ablation matrix")
    s.add_argument("--dry", action="store_true", help="parameter counts only, no training")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--variants", help="comma-separated subset of a..l")
    s.add_argument("--context-k", type=int)

    s = sub.add_parser("analyze-features", parents=[common], help="cross-branch feature alignment")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--view", type=int, default=0, help="position within the selected context views")
    s.add_argument("--out")
    s.add_argument("--pca", action="store_true")
    s.add_argument("--compare-checkpoint", help="second model; reports the per-layer alignment gap")
    s.add_argument("--context-k", type=int)
    s.add_argument("--resolution", type=int)

    s = sub.add_parser("bench", parents=[common], help="time reconstruction and rendering")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--views", default="1,2,4,8")
    s.add_argument("--resolution", type=int)
    s.add_argument("--runs", type=int, default=5)
    s.add_argument("--out")

    s = sub.add_parser("selftest", parents=[common], help="run the built-in invariant checks")
    s.add_argument("--out")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        if not argv:
            raise UsageError(parser.format_usage().strip())
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        rc = load_run_config(args.config, args.set)
        threads = threads_from_env()
    except (UsageError, ConfigError, TypeError) as exc:
        print(f"dvsm: error: {exc}", file=sys.stderr)
        return 1
    try:
        if threads is None:
            HANDLERS[args.command](args, rc, threads)
        else:
            with threadpool_limits(limits=threads):
                HANDLERS[args.command](args, rc, threads)
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 2
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
