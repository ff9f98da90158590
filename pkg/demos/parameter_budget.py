"""Parameter counts for the twelve ablation variants, without training.

    python3 demos/parameter_budget.py
"""

from dvsm.evalsuite import ABLATION_LABELS, ablation_configs
from dvsm.model import ModelConfig, count_params

for D, L, heads, p in [(64, 4, 4, 4), (768, 12, 12, 8)]:
    base = ModelConfig(D=D, L=L, heads=heads, p1=p, p2=p)
    print(f"\nD={D} L={L} heads={heads} patch={p}")
    shared = count_params(base)[0]
    for key, cfg in ablation_configs(base).items():
        n = count_params(cfg)[0]
        print(f"  ({key}) {ABLATION_LABELS[key]:<46s} {n / 1e6:8.3f} M  ({n - shared:+,d})")
