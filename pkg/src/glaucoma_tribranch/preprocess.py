"""Image pipeline: ROI location, CLAHE, augmentation chains, model input."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import cv2
import numpy as np

from .errors import ConfigError, EmptyMask

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


# --- ROI -------------------------------------------------------------------


@dataclass(frozen=True)
class RoiCrop:
    center: tuple  # (row, col), float pixels
    side: int
    source_size: tuple  # (H, W)

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError("ROI side must be positive")

    @property
    def rect(self) -> tuple:
        """(top, left, bottom, right), half-open, shifted to lie inside the image."""
        h, w = self.source_size
        side_r, side_c = min(self.side, h), min(self.side, w)
        top = int(np.floor(self.center[0] + 0.5 - side_r / 2.0))
        left = int(np.floor(self.center[1] + 0.5 - side_c / 2.0))
        top = min(max(top, 0), h - side_r)
        left = min(max(left, 0), w - side_c)
        return top, left, top + side_r, left + side_c


def locate_roi(image: np.ndarray, mask: Optional[np.ndarray] = None, roi_scale: float = 0.6) -> RoiCrop:
    """Center the ROI on the disc mask, or on the brightest green pixels.

    Without a mask the center is the centroid of the top 1% of the
    median-smoothed green channel, a stand-in for a segmentation model.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got {image.shape}")
    h, w = image.shape[:2]
    if mask is not None:
        mask = np.asarray(mask).astype(bool)
        if mask.shape != (h, w):
            raise ValueError(f"mask shape {mask.shape} does not match image {(h, w)}")
        rr, cc = np.nonzero(mask)
        if rr.size == 0:
            raise EmptyMask("ROI mask has no foreground pixels")
    else:
        green = cv2.medianBlur(np.ascontiguousarray(image[..., 1]), 5)
        thr = np.percentile(green, 99)
        rr, cc = np.nonzero(green >= thr)
    center = (float(rr.mean()), float(cc.mean()))
    side = max(1, int(round(roi_scale * min(h, w))))
    return RoiCrop(center, side, (h, w))


def crop(image: np.ndarray, rect: tuple) -> np.ndarray:
    top, left, bottom, right = rect
    return image[top:bottom, left:right]


# --- CLAHE -----------------------------------------------------------------


@dataclass(frozen=True)
class ClaheParams:
    clip_limit: float = 2.0
    tile_grid: tuple = (8, 8)

    def __post_init__(self):
        if not self.clip_limit > 0:
            raise ConfigError("clip_limit must be positive")
        if len(self.tile_grid) != 2 or min(self.tile_grid) < 1:
            raise ConfigError("tile_grid components must be >= 1")


def tile_edges(n: int, tiles: int) -> np.ndarray:
    return np.round(np.linspace(0, n, tiles + 1)).astype(int)


def clipped_histogram(values: np.ndarray, clip_limit: float) -> np.ndarray:
    """256-bin histogram clipped at clip_limit * N / 256, excess spread evenly.

    The bound scales with the tile size (no floor at one count), so a flat
    tile maps v to v - clip_limit * (v - 127.5) / 256 whatever the tile size.
    """
    hist = np.bincount(values.ravel(), minlength=256).astype(np.float64)
    clip = clip_limit * values.size / 256.0
    excess = np.maximum(hist - clip, 0.0).sum()
    return np.minimum(hist, clip) + excess / 256.0


def tile_luts(channel: np.ndarray, params: ClaheParams) -> np.ndarray:
    """Per-tile lookup tables, shape (rows, cols, 256).

    Mapping uses the mid-rank of each level so a flat tile maps close to
    itself instead of being pushed upwards.
    """
    ty, tx = params.tile_grid
    ty, tx = min(ty, channel.shape[0]), min(tx, channel.shape[1])
    er, ec = tile_edges(channel.shape[0], ty), tile_edges(channel.shape[1], tx)
    luts = np.empty((ty, tx, 256))
    for a in range(ty):
        for b in range(tx):
            tile = channel[er[a]:er[a + 1], ec[b]:ec[b + 1]]
            h = clipped_histogram(tile, params.clip_limit)
            below = np.concatenate([[0.0], np.cumsum(h)[:-1]])
            luts[a, b] = 256.0 * (below + h / 2.0) / tile.size - 0.5
    return np.clip(luts, 0.0, 255.0)


def _blend_coords(n: int, tiles: int):
    edges = tile_edges(n, tiles)
    centers = (edges[:-1] + edges[1:]) / 2.0
    pos = np.interp(np.arange(n) + 0.5, centers, np.arange(tiles, dtype=np.float64))
    k0 = np.floor(pos).astype(int)
    k1 = np.minimum(k0 + 1, tiles - 1)
    return k0, k1, pos - k0


def clahe_channel(channel: np.ndarray, params: ClaheParams) -> np.ndarray:
    luts = tile_luts(channel, params)
    ty, tx = luts.shape[:2]
    r0, r1, wr = _blend_coords(channel.shape[0], ty)
    c0, c1, wc = _blend_coords(channel.shape[1], tx)
    v = channel
    top = luts[r0[:, None], c0[None, :], v] * (1 - wc) + luts[r0[:, None], c1[None, :], v] * wc
    bot = luts[r1[:, None], c0[None, :], v] * (1 - wc) + luts[r1[:, None], c1[None, :], v] * wc
    out = top * (1 - wr[:, None]) + bot * wr[:, None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def apply_clahe(image: np.ndarray, params: ClaheParams = ClaheParams()) -> np.ndarray:
    """CLAHE on the luma channel (YCrCb), chroma untouched."""
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("apply_clahe expects an 8-bit 3-channel image")
    ycc = cv2.cvtColor(np.ascontiguousarray(image), cv2.COLOR_RGB2YCrCb)
    ycc[..., 0] = clahe_channel(ycc[..., 0], params)
    return cv2.cvtColor(ycc, cv2.COLOR_YCrCb2RGB)


# --- augmentation ----------------------------------------------------------

AUG_OPS = ("hflip", "vflip", "color_jitter", "gaussian_blur")


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream keyed by the policy seed, positioned by sample index."""
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, 0, int(index)]))


@dataclass(frozen=True)
class AugmentationPolicy:
    p_apply: float = 0.5
    ops: tuple = AUG_OPS
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_apply <= 1.0:
            raise ConfigError("p_apply must lie in [0, 1]")
        unknown = set(self.ops) - set(AUG_OPS)
        if unknown:
            raise ConfigError(f"unknown augmentation ops {sorted(unknown)}")


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def _color_jitter(img, rng):
    b, c, s = rng.uniform(0.8, 1.2, size=3)
    x = img.astype(np.float64) * b
    x = (x - x.mean()) * c + x.mean()
    gray = x @ np.array([0.299, 0.587, 0.114])
    x = gray[..., None] + (x - gray[..., None]) * s
    return _to_u8(x)


def _gaussian_blur(img, rng):
    sigma = rng.uniform(0.1, 1.5)
    return cv2.GaussianBlur(img, (0, 0), sigmaX=sigma)


def augment(image: np.ndarray, policy: AugmentationPolicy, index: int = 0) -> np.ndarray:
    rng = sample_rng(policy.seed, index)
    out = image
    for op in policy.ops:
        if rng.random() >= policy.p_apply:
            continue
        if op == "hflip":
            out = out[:, ::-1]
        elif op == "vflip":
            out = out[::-1]
        elif op == "color_jitter":
            out = _color_jitter(out, rng)
        elif op == "gaussian_blur":
            out = _gaussian_blur(np.ascontiguousarray(out), rng)
    return np.ascontiguousarray(out)


KE_STEPS = (
    "clahe",
    "contrast_brightness",
    "sharpen",
    "denoise",
    "gamma",
    "color_enhance",
    "edge_enhance",
    "multiscale_fuse",
)


@dataclass(frozen=True)
class KnowledgeEnhancePolicy:
    """Probabilistic enhancement chain run before prior extraction."""

    steps: tuple = tuple((s, 0.5) for s in KE_STEPS)
    seed: int = 0
    gamma_range: tuple = (0.8, 1.25)
    clahe: ClaheParams = field(default_factory=ClaheParams)

    def __post_init__(self):
        for name, p in self.steps:
            if name not in KE_STEPS:
                raise ConfigError(f"unknown enhancement step {name!r}")
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"probability for {name} must lie in [0, 1]")


_EDGE_KERNEL = np.array([[-1, -1, -1], [-1, 10, -1], [-1, -1, -1]], dtype=np.float64) / 2.0


def _gamma(img, g):
    lut = _to_u8(255.0 * (np.arange(256) / 255.0) ** g)
    return lut[img]


def _ke_step(name, img, rng, policy):
    f = img.astype(np.float64)
    if name == "clahe":
        return apply_clahe(img, policy.clahe)
    if name == "contrast_brightness":
        alpha, beta = rng.uniform(0.85, 1.15), rng.uniform(-15, 15)
        return _to_u8(f * alpha + beta)
    if name == "sharpen":
        return _to_u8(f + 0.5 * (f - cv2.GaussianBlur(f, (0, 0), 1.0)))
    if name == "denoise":
        return cv2.bilateralFilter(img, 5, 30, 5)
    if name == "gamma":
        return _gamma(img, rng.uniform(*policy.gamma_range))
    if name == "color_enhance":
        hsv = cv2.cvtColor(img, cv2.COLOR_RGB2HSV).astype(np.float64)
        hsv[..., 1] *= rng.uniform(1.0, 1.3)
        return cv2.cvtColor(_to_u8(hsv), cv2.COLOR_HSV2RGB)
    if name == "edge_enhance":
        return _to_u8(cv2.filter2D(f, -1, _EDGE_KERNEL))
    if name == "multiscale_fuse":
        detail = sum(f - cv2.GaussianBlur(f, (0, 0), s) for s in (1.0, 2.0, 4.0)) / 3.0
        return _to_u8(f + 0.5 * detail)
    raise ValueError(name)


def knowledge_enhance(image: np.ndarray, policy: KnowledgeEnhancePolicy, index: int = 0) -> np.ndarray:
    rng = sample_rng(policy.seed, index)
    out = np.ascontiguousarray(image)
    for name, p in policy.steps:
        if rng.random() < p:
            out = _ke_step(name, out, rng, policy)
    return out


# --- model input -----------------------------------------------------------


def to_model_input(
    image: np.ndarray,
    target: int = 299,
    standardize: bool = True,
    mean: tuple = IMAGENET_MEAN,
    std: tuple = IMAGENET_STD,
) -> np.ndarray:
    """Bilinear resize to target x target, scale to [0, 1], standardize.

    Returns float32 1 x 3 x target x target.
    """
    x = image.astype(np.float32) / np.float32(255.0)
    if x.shape[0] != target or x.shape[1] != target:
        x = cv2.resize(x, (target, target), interpolation=cv2.INTER_LINEAR)
    if standardize:
        x = (x - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)
    return np.ascontiguousarray(x.transpose(2, 0, 1)[None])
