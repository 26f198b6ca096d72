"""Turns a manifest into model-ready tensors (global view, ROI view, prior)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .data import Manifest, load_image, load_mask
from .preprocess import (
    AugmentationPolicy,
    ClaheParams,
    KnowledgeEnhancePolicy,
    apply_clahe,
    augment,
    crop,
    knowledge_enhance,
    locate_roi,
    to_model_input,
)


@dataclass(frozen=True)
class PreprocessConfig:
    use_clahe: bool = True
    clahe: ClaheParams = field(default_factory=ClaheParams)
    roi_scale: float = 0.6
    standardize: bool = True
    augment: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    knowledge: KnowledgeEnhancePolicy = field(default_factory=KnowledgeEnhancePolicy)


def preprocess_views(image, mask, cfg: PreprocessConfig):
    """(global view, ROI view) as uint8 images, both CLAHE-enhanced."""
    roi = locate_roi(image, mask, cfg.roi_scale)
    enhanced = apply_clahe(image, cfg.clahe) if cfg.use_clahe else image
    return enhanced, np.ascontiguousarray(crop(enhanced, roi.rect))


def compute_prior(image, encoder, policy: KnowledgeEnhancePolicy, index: int, sample_id: str = ""):
    return encoder(knowledge_enhance(image, policy, index), sample_id)


def build_prior_table(manifest: Manifest, encoder, policy: KnowledgeEnhancePolicy) -> dict:
    """Offline prior extraction, keyed by sample id."""
    table = {}
    for k, s in enumerate(manifest.samples):
        table[s.sample_id] = compute_prior(load_image(s.image_ref), encoder, policy, k, s.sample_id)
    return table


class FundusTensors:
    """Preprocessed, in-memory views of every sample in a manifest.

    Augmentation happens per fetch, keyed by a draw id, so batches are
    reproducible for a fixed seed.
    """

    def __init__(self, manifest: Manifest, input_size: int, cfg: PreprocessConfig,
                 priors: Optional[dict] = None, binary: bool = False):
        self.manifest = manifest
        self.input_size = input_size
        self.cfg = cfg
        self.binary = binary
        self.ids = [s.sample_id for s in manifest.samples]
        self.views = []
        for s in manifest.samples:
            img = load_image(s.image_ref)
            mask = load_mask(s.roi_mask_ref) if s.roi_mask_ref is not None else None
            self.views.append(preprocess_views(img, mask, cfg))
        labels = manifest.labels
        self.labels = (labels > 0).astype(np.int64) if binary else labels
        self.tri_labels = labels
        self.priors = None
        if priors is not None:
            self.priors = np.stack([np.asarray(priors[i], dtype=np.float32) for i in self.ids])
        self._plain = None

    def __len__(self):
        return len(self.views)

    def _inputs(self, g, r):
        t, std = self.input_size, self.cfg.standardize
        return to_model_input(g, t, std)[0], to_model_input(r, t, std)[0]

    def plain(self):
        """All samples without augmentation, as tensors (cached)."""
        if self._plain is None:
            pairs = [self._inputs(g, r) for g, r in self.views]
            self._plain = (torch.from_numpy(np.stack([p[0] for p in pairs])),
                           torch.from_numpy(np.stack([p[1] for p in pairs])))
        return self._plain

    def batch(self, indices, draw_ids=None, policy: Optional[AugmentationPolicy] = None):
        """(x_global, x_roi, prior or None, labels) for the given sample indices.

        With ``draw_ids`` each sample is augmented under ``policy`` (default:
        the configured one) using its draw id as the RNG position.
        """
        indices = np.asarray(indices, dtype=np.int64)
        if draw_ids is None:
            xg, xr = self.plain()
            xg, xr = xg[indices], xr[indices]
        else:
            pol = policy or self.cfg.augment
            gs, rs = [], []
            for i, d in zip(indices, draw_ids):
                g, r = self.views[i]
                g, r = self._inputs(augment(g, pol, 2 * int(d)), augment(r, pol, 2 * int(d) + 1))
                gs.append(g)
                rs.append(r)
            xg, xr = torch.from_numpy(np.stack(gs)), torch.from_numpy(np.stack(rs))
        prior = None if self.priors is None else torch.from_numpy(self.priors[indices])
        return xg, xr, prior, torch.from_numpy(self.labels[indices])
