"""A short end-to-end run through the command line: data, training, rendering, evaluation.

Uses a tiny model and a few hundred steps so it finishes in a couple of
minutes; the acceptance suite trains the full desk model.

    python3 demos/train_and_render.py [workdir]
"""

import json
import sys
from pathlib import Path

from dvsm.cli import main as dvsm

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")
common = ["--set", f"data.path={work / 'data'}", "--set", "data.n_scenes=1", "--set", "data.frames=32",
          "--set", "data.resolutions=[32]", "--set", "model.D=32", "--set", "model.L=2",
          "--set", 'train.curriculum=[{"resolution": 32, "steps": 300}]', "--set", "train.context_counts=[4]",
          "--set", "train.warmup=30", "--set", "train.lam=0.0", "--set", "eval.context_k=4"]

for argv in (["gen-data"],
             ["train", "--out", str(work / "train"), "--log-every", "50"],
             ["render", "--checkpoint", str(work / "train" / "ckpt_000300.dvsm"), "--scene",
              str(work / "data" / "scene_0"), "--camera", "8", "--out", str(work / "view8.ppm")],
             ["eval", "--checkpoint", str(work / "train" / "ckpt_000300.dvsm"), "--out", str(work / "eval")]):
    print("$ dvsm", " ".join(argv[:1]))
    if dvsm(argv + common) != 0:
        sys.exit(1)

report = json.loads((work / "eval" / "report.json").read_text())
print("held-out aggregate:", report["aggregate"])
