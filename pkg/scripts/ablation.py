"""CBAM vs KE-CBAM (and optionally the other presets) over several seeds.

    python3 scripts/ablation.py --seeds 0 1 2 --iterations 300
"""

import argparse
import json
from pathlib import Path

import torch

from glaucoma_tribranch.config import VARIANTS
from glaucoma_tribranch.experiments import mean_auc, run_ablation, summarize


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--variants", nargs="+", default=["branch3cbam", "branch3kecbam"], choices=VARIANTS)
    ap.add_argument("--iterations", type=int, default=300)
    ap.add_argument("--out", default="runs/ablation.json")
    args = ap.parse_args()
    torch.set_num_threads(1)
    results = run_ablation(tuple(args.seeds), tuple(args.variants), iterations=args.iterations)
    table = summarize(results)
    table["mean_val_auc"] = {v: mean_auc(results, v) for v in args.variants}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(table, indent=2) + "\n")
    print(json.dumps(table, indent=2))


if __name__ == "__main__":
    main()
