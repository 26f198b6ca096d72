"""Dynamic Window Mechanism.

Score maps are channel-mean feature maps averaged over every stride-1
window placement. The best windows (several sizes, greedy overlap
suppression) are mapped to normalized centers, cropped from the input
image, re-encoded, summed, pooled and projected.

Window centers follow the published mapping verbatim:

    x_center = (2 i + H - H_p + 1) / (2 H)
    y_center = (2 j + W - W_p + 1) / (2 W)

with (i, j) indexing the score map and (H, W) the feature-map size. For a
window that covers the whole map this gives 1 / (2H), not 1/2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DegenerateCrop, WindowTooLarge


@dataclass(frozen=True)
class DwmConfig:
    window_fracs: tuple[float, ...] = (0.375, 0.5)
    # explicit (H_p, W_p) sizes in feature-map cells; overrides window_fracs
    window_sizes: Optional[tuple[tuple[int, int], ...]] = None
    top_p: int = 3
    suppress_overlap: Optional[float] = 0.5
    feature_stage: int = 3
    mode: str = "dynamic"

    def __post_init__(self):
        if self.top_p < 1:
            raise ConfigError("top_p must be >= 1")
        if self.mode not in ("dynamic", "fixed5"):
            raise ConfigError(f"unknown DWM mode {self.mode!r}")
        if self.feature_stage not in (1, 2, 3, 4):
            raise ConfigError("feature_stage must be 1..4")
        if self.window_sizes is None and not self.window_fracs:
            raise ConfigError("need window_fracs or window_sizes")
        if any(not 0 < f <= 1 for f in self.window_fracs):
            raise ConfigError("window_fracs must lie in (0, 1]")


@dataclass
class ScoreMap:
    data: np.ndarray  # H_s x W_s
    window: tuple
    source_dims: tuple


@dataclass
class WindowSelection:
    window: tuple  # (H_p, W_p)
    index: tuple  # (i_max, j_max)
    center: tuple  # (x_center, y_center), normalized
    crop_rect: tuple  # (top, left, bottom, right) on the image, half-open
    score: float

    def to_dict(self):
        return {
            "window": list(self.window),
            "index": list(self.index),
            "center": list(self.center),
            "crop_rect": list(self.crop_rect),
            "score": self.score,
        }


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def resolve_windows(cfg: DwmConfig, h: int, w: int) -> list:
    """Distinct window sizes for an h x w map, smallest area first."""
    if cfg.window_sizes is not None:
        sizes = [tuple(int(v) for v in s) for s in cfg.window_sizes]
    else:
        sizes = [(max(1, _round_half_up(f * h)), max(1, _round_half_up(f * w))) for f in cfg.window_fracs]
    sizes = sorted(set(sizes), key=lambda s: (s[0] * s[1], s[0], s[1]))
    for hp, wp in sizes:
        if hp < 1 or wp < 1 or hp > h or wp > w:
            raise WindowTooLarge(f"window {(hp, wp)} does not fit a {h}x{w} feature map")
    return sizes


def _channel_mean(f) -> np.ndarray:
    if isinstance(f, torch.Tensor):
        f = f.detach().cpu().numpy()
    f = np.asarray(f, dtype=np.float64)
    if f.ndim == 4:
        if f.shape[0] != 1:
            raise ValueError("score maps are per sample; pass one feature map at a time")
        f = f[0]
    if f.ndim == 3:
        f = f.mean(axis=0)
    if f.ndim != 2:
        raise ValueError(f"cannot build a score map from shape {f.shape}")
    return f


def window_means(m: np.ndarray, window) -> np.ndarray:
    hp, wp = window
    h, w = m.shape
    if hp > h or wp > w or hp < 1 or wp < 1:
        raise WindowTooLarge(f"window {tuple(window)} does not fit a {h}x{w} feature map")
    view = np.lib.stride_tricks.sliding_window_view(m, (hp, wp))
    return view.mean(axis=(2, 3))


def score_map(f, window) -> ScoreMap:
    m = _channel_mean(f)
    return ScoreMap(window_means(m, window), tuple(window), m.shape)


def window_center(i, j, h, w, hp, wp):
    return (2 * i + h - hp + 1) / (2 * h), (2 * j + w - wp + 1) / (2 * w)


def crop_rect_for(center, window, feat_dims, image_size) -> tuple:
    """Window extent around a normalized center, in image pixels, clipped."""
    (xc, yc), (hp, wp), (h, w), (ih, iw) = center, window, feat_dims, image_size
    half_r = hp / h * ih / 2.0
    half_c = wp / w * iw / 2.0
    top = _round_half_up(xc * ih - half_r)
    bottom = _round_half_up(xc * ih + half_r)
    left = _round_half_up(yc * iw - half_c)
    right = _round_half_up(yc * iw + half_c)
    return (min(max(top, 0), ih), min(max(left, 0), iw),
            min(max(bottom, 0), ih), min(max(right, 0), iw))


# relative precision below which two window scores are treated as tied
TIE_DIGITS = 12


def window_iou(a, b) -> float:
    """IoU of two (i, j, hp, wp) rectangles in feature-map cells."""
    ai, aj, ah, aw = a
    bi, bj, bh, bw = b
    dh = min(ai + ah, bi + bh) - max(ai, bi)
    dw = min(aj + aw, bj + bw) - max(aj, bj)
    inter = max(dh, 0) * max(dw, 0)
    return inter / (ah * aw + bh * bw - inter)


def select_windows(f, cfg: DwmConfig, image_size=None) -> list:
    """Top-scoring windows over all sizes and positions.

    Candidates are ranked by score, then size order, then row-major
    position. Scores equal to about 12 significant digits count as tied,
    so exact ties stay ties whatever the summation order. A candidate is kept if its IoU with every kept window is at
    most ``cfg.suppress_overlap``.
    """
    m = _channel_mean(f)
    h, w = m.shape
    image_size = tuple(image_size) if image_size is not None else (h, w)
    sizes = resolve_windows(cfg, h, w)
    scores, ranks, rows, cols = [], [], [], []
    for rank, win in enumerate(sizes):
        s = window_means(m, win)
        ii, jj = np.indices(s.shape)
        scores.append(s.ravel())
        ranks.append(np.full(s.size, rank))
        rows.append(ii.ravel())
        cols.append(jj.ravel())
    scores, ranks = np.concatenate(scores), np.concatenate(ranks)
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    scale = max(float(np.abs(scores).max()), 1e-300)
    key = np.round(scores / scale, TIE_DIGITS)
    # lexsort: last key is primary
    order = np.lexsort((cols, rows, ranks, -key))
    kept, boxes = [], []
    thr = cfg.suppress_overlap
    for k in order:
        hp, wp = sizes[ranks[k]]
        box = (int(rows[k]), int(cols[k]), hp, wp)
        if thr is not None and any(window_iou(box, b) > thr for b in boxes):
            continue
        boxes.append(box)
        center = window_center(box[0], box[1], h, w, hp, wp)
        kept.append(WindowSelection(
            (hp, wp), (box[0], box[1]), center,
            crop_rect_for(center, (hp, wp), (h, w), image_size), float(scores[k]),
        ))
        if len(kept) == cfg.top_p:
            break
    return kept


def fixed_selections(image_size) -> list:
    """Five predefined half-side patches: four corners and the center."""
    ih, iw = image_size
    ph, pw = ih // 2, iw // 2
    out = []
    for top, left in ((0, 0), (0, iw - pw), (ih - ph, 0), (ih - ph, iw - pw),
                      ((ih - ph) // 2, (iw - pw) // 2)):
        rect = (top, left, top + ph, left + pw)
        center = ((top + ph / 2) / ih, (left + pw / 2) / iw)
        out.append(WindowSelection((ph, pw), (top, left), center, rect, float("nan")))
    return out


def crop_patches(images: torch.Tensor, selections, resize_to: int):
    """Crop every selection from its image and resize bilinearly.

    Returns (patches N x 3 x R x R, owner index per patch).
    """
    patches, owner = [], []
    for b, sels in enumerate(selections):
        for s in sels:
            top, left, bottom, right = s.crop_rect
            if bottom <= top or right <= left:
                raise DegenerateCrop(f"empty crop {s.crop_rect} for sample {b}")
            p = images[b:b + 1, :, top:bottom, left:right]
            patches.append(F.interpolate(p, size=(resize_to, resize_to), mode="bilinear",
                                         align_corners=False))
            owner.append(b)
    if not patches:
        raise DegenerateCrop("no selections to aggregate")
    return torch.cat(patches), torch.tensor(owner, dtype=torch.long)


def patch_feature_sum(images, selections, encoder, resize_to, prior=None):
    """Element-wise sum of the encoded patch feature maps, per sample."""
    patches, owner = crop_patches(images, selections, resize_to)
    p_prior = prior[owner] if prior is not None else None
    feats = encoder(patches, p_prior)
    out = feats.new_zeros((len(selections),) + feats.shape[1:])
    return out.index_add(0, owner.to(feats.device), feats)


def aggregate_patches(images, selections, encoder, head, resize_to, prior=None):
    return head(patch_feature_sum(images, selections, encoder, resize_to, prior))
