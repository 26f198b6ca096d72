"""Tri-branch network: global, ROI and dynamic-window branches fused for classification."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .backbone import BackboneConfig, EmbedHead, Encoder, stage_side
from .dwm import DwmConfig, aggregate_patches, fixed_selections, resolve_windows, select_windows
from .errors import BatchMismatch, ConfigError, DimMismatch

BRANCHES = ("global", "roi", "dynamic")
HEAD_MODES = {"tri_class": 3, "binary": 2}


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    dwm: DwmConfig = field(default_factory=DwmConfig)
    branches: tuple[str, ...] = BRANCHES
    # per-branch override of backbone.attention
    branch_attention: dict[str, str] = field(default_factory=dict)
    head_mode: str = "tri_class"
    input_size: int = 299
    patch_size: Optional[int] = None

    def __post_init__(self):
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head_mode must be one of {sorted(HEAD_MODES)}")
        if not self.branches or len(set(self.branches)) != len(self.branches):
            raise ConfigError("branches must be a non-empty list without repeats")
        unknown = set(self.branches) - set(BRANCHES)
        if unknown:
            raise ConfigError(f"unknown branches {sorted(unknown)}")
        order = tuple(b for b in BRANCHES if b in self.branches)
        if order != tuple(self.branches):
            raise ConfigError(f"branches must follow the order {BRANCHES}")
        bad = set(self.branch_attention) - set(BRANCHES)
        if bad:
            raise ConfigError(f"branch_attention names unknown branches {sorted(bad)}")
        if "dynamic" in self.branches and self.dwm.mode == "dynamic" and "global" not in self.branches:
            raise ConfigError("the dynamic-window branch scores the global branch's feature map")
        if self.input_size < 32 or self.resize_to < 32:
            raise ConfigError("input and patch sizes must be >= 32")
        if "dynamic" in self.branches and self.dwm.mode == "dynamic":
            side = stage_side(self.input_size, self.dwm.feature_stage)
            resolve_windows(self.dwm, side, side)
        for b in self.branches:
            self.branch_backbone(b)

    @property
    def num_classes(self) -> int:
        return HEAD_MODES[self.head_mode]

    @property
    def embed_dim(self) -> int:
        return self.backbone.embed_dim

    @property
    def resize_to(self) -> int:
        return self.patch_size or self.input_size

    @property
    def needs_prior(self) -> bool:
        return any(self.branch_backbone(b).attention == "ke_cbam" for b in self.branches)

    def branch_backbone(self, branch) -> BackboneConfig:
        mode = self.branch_attention.get(branch)
        if mode is None:
            return self.backbone
        return dataclasses.replace(self.backbone, attention=mode)


@dataclass
class Prediction:
    logits: torch.Tensor
    probs: torch.Tensor
    embeddings: dict
    selections: Optional[list] = None


class TriBranchNet(nn.Module):
    """Independent encoders per branch sharing one architecture."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.encoders = nn.ModuleDict({b: Encoder(cfg.branch_backbone(b)) for b in cfg.branches})
        self.heads = nn.ModuleDict({
            b: EmbedHead(cfg.backbone.out_channels, d, cfg.backbone.init_gain) for b in cfg.branches
        })
        self.classifier = nn.Linear(len(cfg.branches) * d, cfg.num_classes)
        nn.init.xavier_uniform_(self.classifier.weight, gain=cfg.backbone.init_gain)
        nn.init.zeros_(self.classifier.bias)

    def select(self, x_global, global_stages=None):
        """Per-sample window selections for the dynamic branch."""
        size = tuple(x_global.shape[-2:])
        if self.cfg.dwm.mode == "fixed5":
            return [fixed_selections(size) for _ in range(x_global.shape[0])]
        fmap = global_stages[self.cfg.dwm.feature_stage].detach()
        return [select_windows(fmap[b], self.cfg.dwm, image_size=size) for b in range(fmap.shape[0])]

    def forward(self, x_global, x_roi=None, prior=None) -> Prediction:
        cfg = self.cfg
        batch = x_global.shape[0]
        if x_roi is not None and x_roi.shape[0] != batch:
            raise BatchMismatch(f"global batch {batch} vs ROI batch {x_roi.shape[0]}")
        if prior is not None and prior.shape[0] != batch:
            raise BatchMismatch(f"image batch {batch} vs prior batch {prior.shape[0]}")
        if cfg.needs_prior and prior is None:
            raise DimMismatch("this configuration uses KE-CBAM and needs prior embeddings")
        emb, stages, selections = {}, None, None
        if "global" in cfg.branches:
            f, stages = self.encoders["global"](x_global, prior, return_stages=True)
            emb["global"] = self.heads["global"](f)
        if "roi" in cfg.branches:
            if x_roi is None:
                raise BatchMismatch("ROI branch enabled but no ROI input given")
            emb["roi"] = self.heads["roi"](self.encoders["roi"](x_roi, prior))
        if "dynamic" in cfg.branches:
            selections = self.select(x_global, stages)
            emb["dynamic"] = aggregate_patches(
                x_global, selections, self.encoders["dynamic"], self.heads["dynamic"],
                cfg.resize_to, prior,
            )
        f_final = torch.cat([emb[b] for b in cfg.branches], dim=1)
        emb["final"] = f_final
        logits = self.classifier(f_final)
        return Prediction(logits, torch.softmax(logits, dim=1), emb, selections)


def to_binary(tri_probs):
    """(Negative, Positive, Suspect) -> (non-referable, referable)."""
    if isinstance(tri_probs, torch.Tensor):
        return torch.stack([tri_probs[:, 0], tri_probs[:, 1] + tri_probs[:, 2]], dim=1)
    p = np.asarray(tri_probs, dtype=np.float64)
    return np.stack([p[:, 0], p[:, 1] + p[:, 2]], axis=1)


def merge_labels(labels):
    """Tri-class labels -> referable (1) / non-referable (0)."""
    return (np.asarray(labels) > 0).astype(np.int64)
