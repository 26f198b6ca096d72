"""Optimization loop: Adam, class-balanced epochs, augmentation, early stopping."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import save_checkpoint
from .data import resample_balanced
from .errors import ConfigError, NonFiniteLoss, ShapeMismatch
from .metrics import compute_metrics
from .model import ModelConfig, TriBranchNet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 10_000
    batch_size: int = 16
    aug_probability: float = 0.5
    early_stop_patience: int = 10  # epochs
    eval_every: int = 400
    checkpoint_every: int = 2000
    seed: int = 0
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if self.iterations < 0 or self.eval_every < 1:
            raise ConfigError("iterations must be >= 0 and eval_every >= 1")
        if not 0.0 <= self.aug_probability <= 1.0:
            raise ConfigError("aug_probability must lie in [0, 1]")


# --- Adam ------------------------------------------------------------------


@dataclass
class AdamMoments:
    step: int
    m: list
    v: list

    @classmethod
    def zeros_like(cls, params):
        return cls(0, [torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


def adam_step(params, grads, moments: AdamMoments, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns (new params, new moments); inputs are not modified."""
    if not (len(params) == len(grads) == len(moments.m) == len(moments.v)):
        raise ShapeMismatch("params, grads and moments differ in length")
    t = moments.step + 1
    new_p, new_m, new_v = [], [], []
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, moments.m, moments.v):
            if p.shape != g.shape or p.shape != m.shape or p.shape != v.shape:
                raise ShapeMismatch(f"shape mismatch {tuple(p.shape)} vs {tuple(g.shape)}")
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            m_hat = m / (1 - beta1 ** t)
            v_hat = v / (1 - beta2 ** t)
            new_p.append(p - lr * m_hat / (v_hat.sqrt() + eps))
            new_m.append(m)
            new_v.append(v)
    return new_p, AdamMoments(t, new_m, new_v)


# --- evaluation helpers ----------------------------------------------------


@torch.no_grad()
def predict(model: TriBranchNet, data, batch_size=64):
    """Class probabilities, logits and final embeddings for every sample."""
    model.eval()
    probs, logits, finals = [], [], []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        xg, xr, prior, _ = data.batch(idx)
        out = model(xg, xr, prior)
        probs.append(out.probs)
        logits.append(out.logits)
        finals.append(out.embeddings["final"])
    return torch.cat(probs).numpy(), torch.cat(logits).numpy(), torch.cat(finals).numpy()


def evaluate(model, data, head_mode="tri_class", batch_size=64):
    """(MetricsReport, mean cross-entropy) on a dataset."""
    probs, logits, _ = predict(model, data, batch_size)
    labels = data.labels
    loss = float(F.cross_entropy(torch.from_numpy(logits), torch.from_numpy(labels)))
    return compute_metrics(labels, probs, "binary" if head_mode == "binary" else "tri_class"), loss


# --- training loop ---------------------------------------------------------


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    best_val_metric: float = float("-inf")
    best_val_loss: float = float("inf")
    best_step: int = 0
    steps_since_best: int = 0
    moments: Optional[AdamMoments] = None


@dataclass
class TrainResult:
    model: TriBranchNet
    history: list
    state: TrainState
    stopped_early: bool = False
    val_report: Optional[object] = None
    checkpoints: list = field(default_factory=list)


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def train(model_cfg: ModelConfig, train_data, val_data, tcfg: TrainConfig, run_dir=None,
          config_echo: Optional[dict] = None) -> TrainResult:
    """Train from a seeded initialization and return the best-validation parameters.

    Validation macro AUC (ties broken by lower validation loss) is checked
    every ``eval_every`` steps. Training stops at ``iterations`` or once
    ``early_stop_patience`` epochs pass without improvement.
    """
    torch.manual_seed(tcfg.seed)
    model = TriBranchNet(model_cfg)
    params = [p for p in model.parameters()]
    state = TrainState(moments=AdamMoments.zeros_like(params))
    binary = model_cfg.head_mode == "binary"
    history, checkpoints = [], []
    echo = config_echo if config_echo is not None else {}
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        path = run_dir / "checkpoints" / "init.npz"
        save_checkpoint(path, model.state_dict(), echo, step=0)
        checkpoints.append(str(path))
    hist_fh = open(run_dir / "history.jsonl", "w") if run_dir is not None else None

    def record(entry):
        history.append(entry)
        if hist_fh is not None:
            hist_fh.write(json.dumps(entry, sort_keys=True) + "\n")

    best_params = copy.deepcopy(model.state_dict())
    steps_per_epoch = None
    stopped_early = False
    val_report = None
    # aug_probability governs training-time augmentation; ops and seed come from the data config
    policy = dataclasses.replace(train_data.cfg.augment, p_apply=tcfg.aug_probability)
    try:
        while state.step < tcfg.iterations and not stopped_early:
            order = resample_balanced(train_data.manifest, _epoch_seed(tcfg.seed, state.epoch),
                                      num_classes=2 if binary else 3)
            steps_per_epoch = -(-len(order) // tcfg.batch_size)
            for start in range(0, len(order), tcfg.batch_size):
                idx = order[start:start + tcfg.batch_size]
                draws = None
                if tcfg.aug_probability > 0:
                    base = state.epoch * len(order) + start
                    draws = np.arange(base, base + len(idx))
                model.train()
                xg, xr, prior, y = train_data.batch(idx, draws, policy)
                out = model(xg, xr, prior)
                loss = F.cross_entropy(out.logits, y)
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(state.step + 1, loss.item(),
                                        f"logit range [{float(out.logits.min())}, {float(out.logits.max())}]")
                grads = torch.autograd.grad(loss, params, allow_unused=True)
                grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
                new_params, state.moments = adam_step(params, grads, state.moments, tcfg.lr,
                                                      tcfg.beta1, tcfg.beta2, tcfg.eps)
                with torch.no_grad():
                    for p, q in zip(params, new_params):
                        p.copy_(q)
                state.step += 1
                entry = {"step": state.step, "epoch": state.epoch, "loss": loss.item()}

                if val_data is not None and (state.step % tcfg.eval_every == 0 or state.step == tcfg.iterations):
                    report, vloss = evaluate(model, val_data, model_cfg.head_mode, tcfg.eval_batch_size)
                    entry.update({"val_auc": report.auc, "val_ap": report.ap,
                                  "val_acc": report.accuracy, "val_loss": vloss})
                    better = report.auc > state.best_val_metric or (
                        report.auc == state.best_val_metric and vloss < state.best_val_loss)
                    if better:
                        state.best_val_metric, state.best_val_loss = report.auc, vloss
                        state.best_step = state.step
                        best_params = copy.deepcopy(model.state_dict())
                        val_report = report
                state.steps_since_best = state.step - state.best_step
                record(entry)

                if run_dir is not None and tcfg.checkpoint_every and state.step % tcfg.checkpoint_every == 0:
                    path = run_dir / "checkpoints" / f"step_{state.step:06d}.npz"
                    save_checkpoint(path, model.state_dict(), echo, step=state.step)
                    checkpoints.append(str(path))
                if state.step >= tcfg.iterations:
                    break
                if (val_data is not None and state.best_step > 0
                        and state.steps_since_best >= tcfg.early_stop_patience * steps_per_epoch):
                    stopped_early = True
                    log.info("early stop at step %d (best step %d)", state.step, state.best_step)
                    break
            state.epoch += 1
    finally:
        if hist_fh is not None:
            hist_fh.close()

    if val_data is None:
        best_params = copy.deepcopy(model.state_dict())
        state.best_step = state.step
    model.load_state_dict(best_params)
    if run_dir is not None:
        path = run_dir / "checkpoints" / "final.npz"
        save_checkpoint(path, model.state_dict(), echo, step=state.best_step)
        checkpoints.append(str(path))
    return TrainResult(model, history, state, stopped_early, val_report, checkpoints)
