"""``tribranch`` command-line entry point.

Every command takes a run configuration (``--config`` YAML or ``--preset``)
plus dotted ``--set key=value`` overrides, writes its outputs under
``--run-dir`` and finishes with a ``run.json`` summary there.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime or
numeric error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import re
import shutil
import sys
import time
from pathlib import Path

import cv2
import numpy as np
import torch
import yaml

from . import plots
from .backbone import stage_side
from .checkpoint import load_checkpoint
from .config import (
    PRESETS,
    VARIANTS,
    RunConfig,
    dump_config,
    from_dict,
    load_config,
    save_config,
    to_dict,
    with_variant,
)
from .data import (
    FundusSample,
    Manifest,
    load_image,
    load_manifest,
    load_mask,
    save_png,
    synthetic_cohort,
    write_manifest,
)
from .dataset import FundusTensors, build_prior_table, compute_prior, preprocess_views
from .dwm import select_windows
from .errors import ConfigError, DataError, MissingFile, TriBranchError
from .experiments import make_encoder
from .metrics import compute_metrics
from .model import TriBranchNet
from .preprocess import to_model_input
from .prior import FileLookupPriorEncoder, save_prior_cache
from .saliency import DEFAULT_LAYER, grad_cam_pp, overlay
from .training import predict, train
from .tsne import tsne_export, write_tsne_csv

log = logging.getLogger("tribranch")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


# --- config handling -------------------------------------------------------


def apply_overrides(cfg: RunConfig, assignments) -> RunConfig:
    """``a.b.c=value`` overrides; values are parsed as YAML scalars or lists."""
    if not assignments:
        return cfg
    data = to_dict(cfg)
    for item in assignments:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"override {key!r}: unknown key {p!r}")
            if node[p] is None:
                node[p] = {}
            node = node[p]
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} does not name a config field")
        try:
            node[parts[-1]] = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"override {key!r}: {e}") from None
    return from_dict(RunConfig, data)


def resolve_config(args, fallback: dict = None) -> RunConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    elif getattr(args, "preset", None):
        cfg = PRESETS[args.preset]()
    elif fallback is not None:
        cfg = from_dict(RunConfig, fallback)
    else:
        cfg = PRESETS["desk"]()
    if getattr(args, "variant", None):
        cfg = with_variant(cfg, args.variant)
    return apply_overrides(cfg, getattr(args, "set", None))


def config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()


# --- data helpers ----------------------------------------------------------


def dataset_manifest(cfg: RunConfig, manifest_path=None) -> Manifest:
    path = manifest_path or cfg.data.manifest
    if path:
        return load_manifest(path, base_dir=cfg.data.image_root)
    if cfg.data.synthetic is None:
        raise ConfigError("data needs either a manifest path or a synthetic block")
    s = cfg.data.synthetic
    return synthetic_cohort(
        s.n, seed=s.seed, image_size=s.image_size, val_fraction=s.val_fraction,
        test_fraction=s.test_fraction, disc_radius_range=s.disc_radius_range,
        noise_sigma=s.noise_sigma, brightness_range=s.brightness_range,
    )


def prior_encoder(cfg: RunConfig, priors_path=None):
    if priors_path:
        return FileLookupPriorEncoder(priors_path)
    return make_encoder(cfg)


def prior_table(cfg: RunConfig, manifest: Manifest, priors_path=None):
    if not cfg.model.needs_prior:
        return None
    return build_prior_table(manifest, prior_encoder(cfg, priors_path), cfg.preprocess.knowledge)


def tensors(cfg: RunConfig, manifest: Manifest, priors) -> FundusTensors:
    return FundusTensors(manifest, cfg.model.input_size, cfg.preprocess, priors,
                         binary=cfg.model.head_mode == "binary")


def pick_split(manifest: Manifest, name=None) -> tuple:
    if name is None:
        name = "test" if len(manifest.split("test")) else "val"
    if name == "all":
        return "all", manifest
    part = manifest.split(name)
    if not len(part):
        raise DataError(f"split {name!r} has no samples")
    return name, part


def load_model(checkpoint) -> tuple:
    """(model in eval mode, run config dict stored with the checkpoint)."""
    state, meta = load_checkpoint(checkpoint)
    run = meta.get("config") or {}
    if "model" not in run:
        raise DataError(f"{checkpoint} carries no model configuration")
    cfg = from_dict(RunConfig, run)
    model = TriBranchNet(cfg.model)
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise DataError(f"{checkpoint} does not match its configuration: {e}") from None
    model.eval()
    return model, run


def safe_name(sample_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", sample_id).strip("_") or "sample"


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- commands ----------------------------------------------------------------


def cmd_config(args, run_dir: Path) -> dict:
    cfg = resolve_config(args)
    text = dump_config(cfg)
    out = Path(args.out) if args.out else run_dir / "config.yaml"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    return {"outputs": {"config": str(out)}, "config_sha256": config_digest(cfg)}


def cmd_prepare(args, run_dir: Path) -> dict:
    """Materialize a dataset: images, masks, processed views, manifest, prior cache."""
    cfg = resolve_config(args)
    source = dataset_manifest(cfg, args.manifest)
    images_dir, masks_dir, proc_dir = run_dir / "images", run_dir / "masks", run_dir / "processed"
    samples, prior_ids, prior_rows = [], [], []
    encoder = prior_encoder(cfg, args.priors)
    for k, s in enumerate(source.samples):
        name = f"{k:05d}_{safe_name(Path(s.sample_id).stem)}"
        image = load_image(s.image_ref)
        if isinstance(s.image_ref, np.ndarray):
            image_path = images_dir / f"{name}.png"
            save_png(image_path, image)
        else:
            image_path = images_dir / f"{name}{Path(s.image_ref).suffix.lower()}"
            image_path.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(s.image_ref, image_path)
        mask_path, mask = None, None
        if s.roi_mask_ref is not None:
            mask = load_mask(s.roi_mask_ref)
            mask_path = masks_dir / f"{name}.png"
            save_png(mask_path, mask)
        g, r = preprocess_views(image, mask, cfg.preprocess)
        save_png(proc_dir / f"{name}_global.png", g)
        save_png(proc_dir / f"{name}_roi.png", r)
        new_id = image_path.relative_to(run_dir).as_posix()
        samples.append(FundusSample(image_path, s.label, mask_path, s.split, sample_id=new_id))
        prior_ids.append(new_id)
        prior_rows.append(compute_prior(image, encoder, cfg.preprocess.knowledge, k, s.sample_id))
    manifest = Manifest(samples)
    manifest_path = run_dir / "manifest.csv"
    write_manifest(manifest, manifest_path)
    priors_path = run_dir / "priors.npz"
    save_prior_cache(priors_path, prior_ids, np.stack(prior_rows), encoder.identity)
    save_config(cfg, run_dir / "config.yaml")
    return {
        "outputs": {"manifest": str(manifest_path), "priors": str(priors_path),
                    "images": str(images_dir), "processed": str(proc_dir)},
        "summary": {"n": len(manifest), "class_counts": manifest.class_counts},
        "config_sha256": config_digest(cfg),
    }


def cmd_train(args, run_dir: Path) -> dict:
    cfg = resolve_config(args)
    torch.manual_seed(cfg.seed)
    manifest = dataset_manifest(cfg, args.manifest)
    priors = prior_table(cfg, manifest, args.priors)
    train_m, val_m = manifest.split("train"), manifest.split("val")
    if not len(train_m):
        raise DataError("no training samples")
    train_data = tensors(cfg, train_m, priors)
    val_data = tensors(cfg, val_m, priors) if len(val_m) else None
    save_config(cfg, run_dir / "config.yaml")
    res = train(cfg.model, train_data, val_data, cfg.train, run_dir=run_dir, config_echo=to_dict(cfg))
    eval_data = val_data if val_data is not None else train_data
    probs, _, _ = predict(res.model, eval_data, cfg.train.eval_batch_size)
    report = compute_metrics(eval_data.labels, probs, cfg.model.head_mode)
    write_json(run_dir / "metrics.json", report.to_dict())
    return {
        "outputs": {"checkpoint": res.checkpoints[-1], "history": str(run_dir / "history.jsonl"),
                    "metrics": str(run_dir / "metrics.json")},
        "summary": {"steps": res.state.step, "best_step": res.state.best_step,
                    "stopped_early": res.stopped_early,
                    "split": "val" if val_data is not None else "train",
                    "auc": report.auc, "accuracy": report.accuracy},
        "config_sha256": config_digest(cfg),
    }


def read_predictions(path):
    """CSV ``id,label,prob_0,...,prob_{k-1}`` -> (ids, labels, probs)."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["id", "label"] or len(rows[0]) < 4:
        raise DataError(f"{path}: header must be id,label,prob_0,...")
    ids, labels, probs = [], [], []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(rows[0]):
            raise DataError(f"{path}:{line}: expected {len(rows[0])} fields")
        try:
            labels.append(int(row[1]))
            probs.append([float(v) for v in row[2:]])
        except ValueError:
            raise DataError(f"{path}:{line}: non-numeric label or probability") from None
        ids.append(row[0])
    return ids, np.array(labels, dtype=np.int64), np.array(probs, dtype=np.float64)


def write_predictions(path, ids, labels, probs) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"] + [f"prob_{c}" for c in range(probs.shape[1])])
        for i, y, p in zip(ids, labels, probs):
            w.writerow([i, int(y)] + [repr(float(v)) for v in p])


def cmd_eval(args, run_dir: Path) -> dict:
    outputs = {}
    if args.predictions:
        ids, labels, probs = read_predictions(args.predictions)
        mode = args.mode or ("binary" if probs.shape[1] == 2 else "tri_class")
        split, digest = "predictions", None
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --predictions")
        model, stored = load_model(args.checkpoint)
        cfg = resolve_config(args, stored)
        manifest = dataset_manifest(cfg, args.manifest)
        split, part = pick_split(manifest, args.split)
        data = tensors(cfg, part, prior_table(cfg, part, args.priors))
        probs, _, _ = predict(model, data, cfg.train.eval_batch_size)
        ids, labels = data.ids, data.labels
        mode = args.mode or model.cfg.head_mode
        if mode == "tri_class" and model.cfg.head_mode == "binary":
            raise ConfigError("a binary model cannot be scored in tri_class mode")
        outputs["predictions"] = str(run_dir / "predictions.csv")
        write_predictions(outputs["predictions"], ids, labels, probs)
        digest = config_digest(cfg)
    report = compute_metrics(labels, probs, mode)
    write_json(run_dir / "metrics.json", report.to_dict())
    plots.plot_roc(report, run_dir / "roc.png")
    plots.plot_confusion(report, run_dir / "confusion.png")
    outputs.update({"metrics": str(run_dir / "metrics.json"), "roc": str(run_dir / "roc.png"),
                    "confusion": str(run_dir / "confusion.png")})
    return {"outputs": outputs,
            "summary": {"split": split, "mode": mode, "n": report.n, "auc": report.auc,
                        "ap": report.ap, "accuracy": report.accuracy},
            "config_sha256": digest}


def cmd_cam(args, run_dir: Path) -> dict:
    model, stored = load_model(args.checkpoint)
    cfg = resolve_config(args, stored)
    manifest = dataset_manifest(cfg, args.manifest)
    split, part = pick_split(manifest, args.split)
    if args.limit is not None:
        part = Manifest(part.samples[:args.limit])
    data = tensors(cfg, part, prior_table(cfg, part, args.priors))
    t = cfg.model.input_size
    entries, heatmaps = [], []
    for k in range(len(data)):
        xg, xr, prior, y = data.batch([k])
        (smap,) = grad_cam_pp(model, xg, xr, prior, args.target_class, args.layer)
        view = cv2.resize(data.views[k][0], (t, t), interpolation=cv2.INTER_LINEAR)
        name = f"{k:05d}_{safe_name(Path(data.ids[k]).stem)}.png"
        save_png(run_dir / "cams" / name, overlay(view, smap.heatmap, alpha=0.5))
        heatmaps.append(smap.heatmap.astype(np.float32))
        entries.append({"id": data.ids[k], "label": int(y[0]), "target_class": smap.target_class,
                        "layer": smap.layer_id, "file": f"cams/{name}"})
    np.savez_compressed(run_dir / "cams" / "heatmaps.npz", ids=np.array(data.ids, dtype=str),
                        heatmaps=np.stack(heatmaps))
    write_json(run_dir / "cams" / "index.json", entries)
    return {"outputs": {"cams": str(run_dir / "cams")},
            "summary": {"split": split, "n": len(entries), "layer": args.layer},
            "config_sha256": config_digest(cfg)}


def cmd_tsne(args, run_dir: Path) -> dict:
    model, stored = load_model(args.checkpoint)
    cfg = resolve_config(args, stored)
    manifest = dataset_manifest(cfg, args.manifest)
    split, part = pick_split(manifest, args.split)
    data = tensors(cfg, part, prior_table(cfg, part, args.priors))
    _, _, finals = predict(model, data, cfg.train.eval_batch_size)
    seed = cfg.seed if args.seed is None else args.seed
    coords = tsne_export(finals, data.labels, perplexity=args.perplexity, seed=seed)
    out = run_dir / "tsne.csv"
    write_tsne_csv(out, data.ids, coords, data.labels)
    return {"outputs": {"tsne": str(out)},
            "summary": {"split": split, "n": len(data), "perplexity": args.perplexity, "seed": seed},
            "config_sha256": config_digest(cfg)}


def debug_feature_map(cfg: RunConfig, image, mask, model=None, encoder=None):
    """Feature map the dynamic window search runs on, for one image.

    With a model: the global encoder's configured stage. Without one: the
    luminance of the global view, area-pooled to that stage's grid.
    """
    g, _ = preprocess_views(image, mask, cfg.preprocess)
    t, stage = cfg.model.input_size, cfg.model.dwm.feature_stage
    if model is None:
        side = stage_side(t, stage)
        gray = cv2.cvtColor(cv2.resize(g, (t, t), interpolation=cv2.INTER_LINEAR), cv2.COLOR_RGB2GRAY)
        return cv2.resize(gray.astype(np.float64), (side, side), interpolation=cv2.INTER_AREA)
    x = torch.from_numpy(to_model_input(g, t, cfg.preprocess.standardize))
    prior = None
    if model.cfg.needs_prior:
        prior = torch.from_numpy(compute_prior(image, encoder, cfg.preprocess.knowledge, 0)[None])
    with torch.no_grad():
        _, stages = model.encoders["global"](x, prior, return_stages=True)
    return stages[stage][0].numpy().astype(np.float64)


def cmd_dwm_debug(args, run_dir: Path) -> dict:
    model, stored = (load_model(args.checkpoint) if args.checkpoint else (None, None))
    cfg = resolve_config(args, stored)
    image = load_image(args.image)
    mask = load_mask(args.mask) if args.mask else None
    encoder = prior_encoder(cfg, args.priors) if model is not None and model.cfg.needs_prior else None
    fmap = debug_feature_map(cfg, image, mask, model, encoder)
    selections = select_windows(fmap, cfg.model.dwm, image_size=image.shape[:2])
    write_json(run_dir / "selections.json", [s.to_dict() for s in selections])
    save_png(run_dir / "overlay.png", plots.draw_selections(image, selections))
    np.save(run_dir / "feature_map.npy", fmap)
    return {"outputs": {"selections": str(run_dir / "selections.json"),
                        "overlay": str(run_dir / "overlay.png"),
                        "feature_map": str(run_dir / "feature_map.npy")},
            "summary": {"source": "model" if model is not None else "intensity",
                        "feature_dims": list(fmap.shape[-2:]), "image_size": list(image.shape[:2]),
                        "n_selected": len(selections)},
            "config_sha256": config_digest(cfg)}


COMMANDS = {
    "config": cmd_config,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "cam": cmd_cam,
    "tsne": cmd_tsne,
    "dwm-debug": cmd_dwm_debug,
}


# --- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--config", help="run configuration YAML")
    src.add_argument("--preset", choices=sorted(PRESETS), help="built-in configuration")
    common.add_argument("--variant", choices=VARIANTS, help="ablation variant applied on top")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                        help="dotted config override, e.g. train.lr=1e-4 (repeatable)")
    common.add_argument("--run-dir", help="output directory (default runs/<command>)")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--manifest", help="CSV manifest; overrides data.manifest")
    data.add_argument("--priors", help="prior-embedding cache (.npz) to use instead of the encoder")

    p = argparse.ArgumentParser(prog="tribranch", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("config", parents=[common], help="write a resolved configuration")
    c.add_argument("--out", help="destination YAML (default <run-dir>/config.yaml)")

    sub.add_parser("prepare", parents=[common, data], help="materialize images, manifest and prior cache")
    sub.add_parser("train", parents=[common, data], help="train and checkpoint a model")

    e = sub.add_parser("eval", parents=[common, data], help="metrics, ROC and confusion plots")
    e.add_argument("--checkpoint")
    e.add_argument("--predictions", help="CSV id,label,prob_0,... instead of a model")
    e.add_argument("--split", choices=("train", "val", "test", "all"))
    e.add_argument("--mode", choices=("tri_class", "binary"))

    m = sub.add_parser("cam", parents=[common, data], help="Grad-CAM++ overlays")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--split", choices=("train", "val", "test", "all"))
    m.add_argument("--layer", default=DEFAULT_LAYER, help="<branch>.stage<k>")
    m.add_argument("--target-class", type=int, help="default: predicted class")
    m.add_argument("--limit", type=int, help="at most this many samples")

    t = sub.add_parser("tsne", parents=[common, data], help="2-D t-SNE of final embeddings")
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--split", choices=("train", "val", "test", "all"))
    t.add_argument("--perplexity", type=float, default=30.0)
    t.add_argument("--seed", type=int, help="default: the config seed")

    d = sub.add_parser("dwm-debug", parents=[common], help="inspect dynamic window selections")
    d.add_argument("--image", required=True)
    d.add_argument("--mask")
    d.add_argument("--checkpoint", help="score on model features instead of image intensity")
    d.add_argument("--priors")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run_dir = Path(args.run_dir or Path("runs") / args.command)
    started = time.time()
    record = {"command": args.command, "argv": list(sys.argv[1:] if argv is None else argv)}
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        record.update(COMMANDS[args.command](args, run_dir))
        code = EXIT_OK
    except ConfigError as e:
        code, record["error"] = EXIT_CONFIG, f"{type(e).__name__}: {e}"
    except DataError as e:
        code, record["error"] = EXIT_DATA, f"{type(e).__name__}: {e}"
    except TriBranchError as e:
        code, record["error"] = EXIT_RUNTIME, f"{type(e).__name__}: {e}"
    if "error" in record:
        print(f"tribranch {args.command}: {record['error']}", file=sys.stderr)
    record.update({"status": "ok" if code == EXIT_OK else "error", "exit_code": code,
                   "started": started, "seconds": round(time.time() - started, 3)})
    if run_dir.is_dir():
        write_json(run_dir / "run.json", record)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
