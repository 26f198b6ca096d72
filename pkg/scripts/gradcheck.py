"""Finite-difference check of the full tri-branch loss on the check-sized model.

Reports the pass rate (relative error <= 1e-2) for eps = 1e-3 and 1e-6,
at the constructor initialization and at He-normal weights, over several seeds.

    python3 scripts/gradcheck.py --seeds 0 1 2 --out runs/gradcheck.json
"""

import argparse
import json
from pathlib import Path

import numpy as np
import torch

from glaucoma_tribranch.backbone import count_parameters
from glaucoma_tribranch.gradcheck import check_model_config, check_tri_branch, he_init
from glaucoma_tribranch.model import TriBranchNet


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--coords", type=int, default=200)
    ap.add_argument("--out", default="runs/gradcheck.json")
    args = ap.parse_args()
    torch.set_num_threads(1)
    cfg = check_model_config()
    table = {"parameters": count_parameters(TriBranchNet(cfg)), "rates": {}}
    for init_name, init in (("default", None), ("he", he_init)):
        for eps in (1e-3, 1e-6):
            rates = [check_tri_branch(cfg, eps=eps, n_coords=args.coords, seed=s, weight_init=init).pass_rate()
                     for s in args.seeds]
            table["rates"][f"{init_name}/eps={eps:g}"] = {"per_seed": rates, "mean": float(np.mean(rates))}
            print(f"{init_name:8s} eps={eps:g}  {rates}", flush=True)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(table, indent=2) + "\n")


if __name__ == "__main__":
    main()
