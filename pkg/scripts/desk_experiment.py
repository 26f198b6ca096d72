"""Seeded desk-scale run: tiny model, 600 synthetic images, up to 1,500 steps.

Also scores Grad-CAM++ disc overlap on the validation Positive samples.

    python3 scripts/desk_experiment.py --out runs/desk
"""

import argparse
import dataclasses
import json
from pathlib import Path

import torch

from glaucoma_tribranch.config import desk_config, save_config
from glaucoma_tribranch.experiments import cohort_for, disc_overlap, run_desk, tensors_for


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--iterations", type=int)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)
    cfg = desk_config()
    tr = dataclasses.replace(cfg.train, seed=args.seed)
    if args.iterations is not None:
        tr = dataclasses.replace(tr, iterations=args.iterations)
    cfg = dataclasses.replace(cfg, train=tr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    manifest = cohort_for(cfg)
    train_data, val_data = tensors_for(cfg, manifest)
    r = run_desk(cfg, manifest, (train_data, val_data), run_dir=out)
    summary = {"train_accuracy": r.train_accuracy, "val_auc": r.val_auc, "val_accuracy": r.val_accuracy,
               "best_step": r.result.state.best_step, "steps": r.result.state.step,
               "seconds": round(r.seconds, 1)}
    for layer in ("global.stage4", "global.stage3"):
        _, flags, _ = disc_overlap(r.result.model, val_data, label=1, layer_id=layer)
        summary[f"disc_hit_rate/{layer}"] = float(flags.mean())
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
