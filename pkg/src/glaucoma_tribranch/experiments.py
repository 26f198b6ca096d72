"""Seeded desk-scale experiments shared by scripts/ and the acceptance suite."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import cv2
import numpy as np

from .config import RunConfig, desk_config, with_variant
from .data import Manifest, load_mask, synthetic_cohort
from .dataset import FundusTensors, build_prior_table
from .prior import FileLookupPriorEncoder, StubPriorEncoder
from .saliency import DEFAULT_LAYER, grad_cam_pp
from .training import TrainResult, evaluate, train


def make_encoder(cfg: RunConfig):
    if cfg.prior.kind == "file":
        return FileLookupPriorEncoder(cfg.prior.cache)
    return StubPriorEncoder(dim=cfg.model.backbone.prior_dim, seed=cfg.prior.seed)


def cohort_for(cfg: RunConfig) -> Manifest:
    s = cfg.data.synthetic
    return synthetic_cohort(
        s.n, seed=s.seed, image_size=s.image_size, val_fraction=s.val_fraction,
        test_fraction=s.test_fraction, disc_radius_range=s.disc_radius_range,
        noise_sigma=s.noise_sigma, brightness_range=s.brightness_range,
    )


def tensors_for(cfg: RunConfig, manifest: Manifest, priors=None):
    """(train, val) tensor sets; priors are built from the stub encoder when needed."""
    if not cfg.model.needs_prior:
        priors = None
    elif priors is None:
        priors = build_prior_table(manifest, make_encoder(cfg), cfg.preprocess.knowledge)
    binary = cfg.model.head_mode == "binary"
    out = []
    for split in ("train", "val"):
        m = manifest.split(split)
        out.append(FundusTensors(m, cfg.model.input_size, cfg.preprocess, priors, binary) if len(m) else None)
    return tuple(out)


@dataclass
class ExperimentResult:
    config: RunConfig
    result: TrainResult
    train_accuracy: float
    val_auc: float
    val_accuracy: float
    seconds: float


def run_desk(cfg: RunConfig = None, manifest: Manifest = None, data=None, run_dir=None) -> ExperimentResult:
    cfg = cfg or desk_config()
    t0 = time.time()
    manifest = manifest if manifest is not None else cohort_for(cfg)
    train_data, val_data = data if data is not None else tensors_for(cfg, manifest)
    res = train(cfg.model, train_data, val_data, cfg.train, run_dir=run_dir)
    train_report, _ = evaluate(res.model, train_data, cfg.model.head_mode)
    val_report, _ = evaluate(res.model, val_data, cfg.model.head_mode)
    return ExperimentResult(cfg, res, train_report.accuracy, val_report.auc, val_report.accuracy,
                            time.time() - t0)


def run_ablation(seeds=(0, 1, 2), variants=("branch3cbam", "branch3kecbam"), base: RunConfig = None,
                 iterations=None):
    """Validation AUC per (variant, seed) on the shared synthetic benchmark."""
    base = base or desk_config()
    if iterations is not None:
        base = dataclasses.replace(base, train=dataclasses.replace(base.train, iterations=iterations))
    manifest = cohort_for(base)
    ke_cfg = with_variant(base, "branch3kecbam")
    priors = build_prior_table(manifest, make_encoder(ke_cfg), ke_cfg.preprocess.knowledge)
    out = {}
    for v in variants:
        vcfg = with_variant(base, v)
        data = tensors_for(vcfg, manifest, priors)
        for seed in seeds:
            scfg = dataclasses.replace(vcfg, train=dataclasses.replace(vcfg.train, seed=seed))
            out[(v, seed)] = run_desk(scfg, manifest, data)
    return out


def summarize(results) -> dict:
    return {f"{v}/seed{s}": {"val_auc": r.val_auc, "train_acc": r.train_accuracy,
                             "val_acc": r.val_accuracy, "best_step": r.result.state.best_step,
                             "steps": r.result.state.step, "seconds": round(r.seconds, 1)}
            for (v, s), r in results.items()}


def mean_auc(results, variant) -> float:
    return float(np.mean([r.val_auc for (v, _), r in results.items() if v == variant]))


def disc_overlap(model, data, label: int = 1, layer_id: str = DEFAULT_LAYER, quantile: float = 0.9):
    """Per-sample flags: does the top-decile Grad-CAM++ region touch the disc mask?

    Only samples of class ``label`` with a disc mask are scored. Returns
    (sample ids, flags, heatmaps resized to each mask).
    """
    ids, flags, heats = [], [], []
    for k, s in enumerate(data.manifest.samples):
        if s.label != label or s.roi_mask_ref is None:
            continue
        mask = load_mask(s.roi_mask_ref).astype(bool)
        xg, xr, prior, _ = data.batch([k])
        (smap,) = grad_cam_pp(model, xg, xr, prior, target_class=None, layer_id=layer_id)
        heat = cv2.resize(smap.heatmap, (mask.shape[1], mask.shape[0]), interpolation=cv2.INTER_LINEAR)
        top = (heat >= np.quantile(heat, quantile)) & (heat > 0)
        ids.append(s.sample_id)
        flags.append(bool((top & mask).any()))
        heats.append(heat)
    return ids, np.array(flags), heats
