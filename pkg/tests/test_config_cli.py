import csv
import json

import numpy as np
import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from glaucoma_tribranch.checkpoint import load_checkpoint
from glaucoma_tribranch.cli import apply_overrides, main
from glaucoma_tribranch.config import (
    RunConfig,
    desk_config,
    dump_config,
    from_dict,
    full_config,
    load_config,
    parse_config,
    to_dict,
    with_variant,
)
from glaucoma_tribranch.data import save_png
from glaucoma_tribranch.dwm import DwmConfig, resolve_windows
from glaucoma_tribranch.errors import ConfigError
from oracles import brute_force_windows

SMALL = ["--set", "data.synthetic.n=30", "--set", "data.synthetic.image_size=64"]


# --- config ------------------------------------------------------------------


@given(
    st.floats(0.0, 1e-2), st.integers(0, 10_000), st.integers(0, 2**31 - 1),
    st.sampled_from(["tri_class", "binary"]), st.sampled_from(["none", "cbam", "ke_cbam"]),
    st.integers(1, 5), st.sampled_from([None, 0.25, 0.5]),
)
def test_config_round_trip(lr, iterations, seed, head, attention, top_p, suppress):
    cfg = apply_overrides(desk_config(), [
        f"train.lr={lr!r}", f"train.iterations={iterations}", f"seed={seed}",
        f"model.head_mode={head}", f"model.backbone.attention={attention}",
        f"model.dwm.top_p={top_p}", f"model.dwm.suppress_overlap={'null' if suppress is None else suppress}",
    ])
    assert parse_config(dump_config(cfg)) == cfg
    assert from_dict(RunConfig, to_dict(cfg)) == cfg
    assert dump_config(parse_config(dump_config(cfg))) == dump_config(cfg)


@pytest.mark.parametrize("make", [desk_config, full_config] + [
    (lambda v=v: with_variant(desk_config(), v)) for v in ("patch5", "branch2cbam", "branch3cbam")])
def test_presets_round_trip(make):
    cfg = make()
    assert parse_config(dump_config(cfg)) == cfg


def test_unknown_and_invalid_keys():
    text = dump_config(desk_config())
    data = yaml.safe_load(text)
    data["train"]["learning_rate"] = 1e-3
    with pytest.raises(ConfigError, match="learning_rate"):
        parse_config(yaml.safe_dump(data))
    data = yaml.safe_load(text)
    data["schema_version"] = 99
    with pytest.raises(ConfigError):
        parse_config(yaml.safe_dump(data))
    with pytest.raises(ConfigError):
        apply_overrides(desk_config(), ["model.backbone.depth=3"])
    with pytest.raises(ConfigError):
        apply_overrides(desk_config(), ["train.batch_size=0"])
    with pytest.raises(ConfigError):
        apply_overrides(desk_config(), ["train.lr"])


def test_overrides_parse_yaml_values():
    cfg = apply_overrides(desk_config(), ["model.dwm.window_fracs=[0.25, 0.5]", "train.lr=1e-4"])
    assert cfg.model.dwm.window_fracs == (0.25, 0.5) and cfg.train.lr == 1e-4


# --- commands ----------------------------------------------------------------


def _run(argv):
    return main(argv)


def test_config_command(tmp_path):
    assert _run(["config", "--run-dir", str(tmp_path), "--variant", "branch3cbam"]) == 0
    cfg = load_config(tmp_path / "config.yaml")
    assert cfg.model.backbone.attention == "cbam"
    record = json.loads((tmp_path / "run.json").read_text())
    assert record["status"] == "ok" and record["exit_code"] == 0
    assert _run(["config", "--run-dir", str(tmp_path / "bad"), "--set", "train.nope=1"]) == 2


def test_prepare_synthetic_and_rerun(tmp_path):
    argv = ["prepare", "--set", "data.synthetic.n=60", "--set", "data.synthetic.image_size=64"]
    assert _run(argv + ["--run-dir", str(tmp_path / "a")]) == 0
    assert _run(argv + ["--run-dir", str(tmp_path / "b")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "a" / "manifest.csv")))
    assert len(rows) == 60 and {r["label"] for r in rows} == {"0", "1", "2"}
    assert len(list((tmp_path / "a" / "images").iterdir())) == 60
    assert len(list((tmp_path / "a" / "processed").iterdir())) == 120
    a = (tmp_path / "a" / "manifest.csv").read_bytes()
    assert a == (tmp_path / "b" / "manifest.csv").read_bytes()
    pa, pb = np.load(tmp_path / "a" / "priors.npz"), np.load(tmp_path / "b" / "priors.npz")
    np.testing.assert_array_equal(pa["embeddings"], pb["embeddings"])


def test_prepare_missing_image_root(tmp_path, capsys):
    (tmp_path / "m.csv").write_text("image_path,label,split\na.png,0,train\n")
    code = _run(["prepare", "--run-dir", str(tmp_path / "out"), "--manifest", str(tmp_path / "m.csv"),
                 "--set", f"data.image_root={tmp_path / 'no_images'}"])
    assert code == 3
    assert "MissingFile" in capsys.readouterr().err
    record = json.loads((tmp_path / "out" / "run.json").read_text())
    assert "no_images" in record["error"]


def test_missing_manifest_is_data_error(tmp_path):
    assert _run(["train", "--run-dir", str(tmp_path), "--manifest", str(tmp_path / "none.csv")]) == 3


def test_eval_perfect_predictions(tmp_path):
    pred = tmp_path / "p.csv"
    with open(pred, "w") as fh:
        fh.write("id,label,prob_0,prob_1,prob_2\n")
        for k, y in enumerate([0, 1, 2, 0, 1, 2]):
            p = [0.05, 0.05, 0.05]
            p[y] = 0.9
            fh.write(f"s{k},{y},{p[0]},{p[1]},{p[2]}\n")
    assert _run(["eval", "--run-dir", str(tmp_path / "ev"), "--predictions", str(pred)]) == 0
    m = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert m["accuracy"] == 1.0 and m["auc"] == 1.0
    assert (tmp_path / "ev" / "roc.png").stat().st_size > 0
    assert (tmp_path / "ev" / "confusion.png").stat().st_size > 0
    assert _run(["eval", "--run-dir", str(tmp_path / "ev2"), "--predictions", str(pred), "--mode", "binary"]) == 0
    assert json.loads((tmp_path / "ev2" / "metrics.json").read_text())["accuracy"] == 1.0


def test_eval_needs_a_source(tmp_path):
    assert _run(["eval", "--run-dir", str(tmp_path)]) == 2


def test_train_lr_zero_final_equals_init(tmp_path):
    code = _run(["train", "--run-dir", str(tmp_path)] + SMALL +
                ["--set", "train.lr=0", "--set", "train.iterations=3", "--set", "train.eval_every=2"])
    assert code == 0
    init, meta = load_checkpoint(tmp_path / "checkpoints" / "init.npz")
    final, _ = load_checkpoint(tmp_path / "checkpoints" / "final.npz")
    assert init.keys() == final.keys()
    for k in init:
        assert np.array_equal(init[k].numpy(), final[k].numpy()), k
    assert meta["config"]["train"]["lr"] == 0.0
    history = [json.loads(line) for line in open(tmp_path / "history.jsonl")]
    assert [h["step"] for h in history] == [1, 2, 3]


def test_train_eval_cam_tsne_chain(tmp_path):
    run = tmp_path / "train"
    assert _run(["train", "--run-dir", str(run)] + SMALL +
                ["--set", "train.iterations=4", "--set", "train.eval_every=2"]) == 0
    ckpt = str(run / "checkpoints" / "final.npz")
    assert _run(["eval", "--run-dir", str(tmp_path / "ev"), "--checkpoint", ckpt, "--split", "val"]) == 0
    preds = list(csv.DictReader(open(tmp_path / "ev" / "predictions.csv")))
    assert len(preds) == 6
    assert _run(["cam", "--run-dir", str(tmp_path / "cam"), "--checkpoint", ckpt, "--limit", "2"]) == 0
    heat = np.load(tmp_path / "cam" / "cams" / "heatmaps.npz")["heatmaps"]
    assert heat.shape == (2, 64, 64) and np.isfinite(heat).all() and heat.min() >= 0 and heat.max() <= 1
    assert _run(["cam", "--run-dir", str(tmp_path / "cam2"), "--checkpoint", ckpt, "--layer", "global.stage7"]) == 2
    assert _run(["tsne", "--run-dir", str(tmp_path / "ts"), "--checkpoint", ckpt, "--split", "all"]) == 0
    rows = list(csv.reader(open(tmp_path / "ts" / "tsne.csv")))
    assert rows[0] == ["id", "x", "y", "label"] and len(rows) == 31


def _blob_image(center, size=128, radius=8):
    yy, xx = np.mgrid[:size, :size]
    img = np.full((size, size, 3), 20, np.uint8)
    img[(yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= radius ** 2] = 240
    return img


@pytest.mark.parametrize("center", [(100, 40), (30, 30), (64, 100)])
def test_dwm_debug_bright_blob(tmp_path, center):
    save_png(tmp_path / "blob.png", _blob_image(center))
    assert _run(["dwm-debug", "--run-dir", str(tmp_path / "d"), "--image", str(tmp_path / "blob.png")]) == 0
    sels = json.loads((tmp_path / "d" / "selections.json").read_text())
    top, left, bottom, right = sels[0]["crop_rect"]
    assert top <= center[0] < bottom and left <= center[1] < right
    fmap = np.load(tmp_path / "d" / "feature_map.npy")
    cfg = DwmConfig()
    want = brute_force_windows(fmap, resolve_windows(cfg, *fmap.shape), cfg.top_p, cfg.suppress_overlap)
    assert [(tuple(s["window"]), tuple(s["index"])) for s in sels] == [(w, i) for _, w, i in want]
    np.testing.assert_allclose([s["score"] for s in sels], [s for s, _, _ in want], atol=1e-9)
    assert (tmp_path / "d" / "overlay.png").is_file()


def test_dwm_debug_missing_image(tmp_path):
    assert _run(["dwm-debug", "--run-dir", str(tmp_path), "--image", str(tmp_path / "x.png")]) == 3
