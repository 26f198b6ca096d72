"""Dataset manifests, synthetic fundus generation and class rebalancing."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image

from .errors import (
    ConfigError,
    DanglingReference,
    DataError,
    EmptyClass,
    MalformedRow,
    MissingFile,
)

NEGATIVE, POSITIVE, SUSPECT = 0, 1, 2
CLASS_NAMES = {NEGATIVE: "Negative", POSITIVE: "Positive", SUSPECT: "Suspect"}
SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ("image_path", "label", "split", "mask_path")

# generator policy, not clinical values
POSITIVE_CDR = 0.7
SUSPECT_CDR = 0.55

MIN_SIDE = 64

ImageRef = Union[str, Path, np.ndarray]


@dataclass(eq=False)
class FundusSample:
    image_ref: ImageRef
    label: int
    roi_mask_ref: Optional[ImageRef] = None
    split: str = "train"
    sample_id: str = ""

    def __post_init__(self):
        if self.label not in CLASS_NAMES:
            raise ValueError(f"label must be one of 0, 1, 2, got {self.label!r}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if not self.sample_id:
            if isinstance(self.image_ref, np.ndarray):
                raise ValueError("in-memory samples need an explicit sample_id")
            self.sample_id = str(self.image_ref)


@dataclass
class Manifest:
    samples: list
    class_counts: dict = field(default_factory=dict)

    def __post_init__(self):
        counts = count_labels(self.samples)
        if self.class_counts and self.class_counts != counts:
            raise DataError(
                f"class_counts {self.class_counts} disagree with samples {counts}"
            )
        self.class_counts = counts

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def split(self, name: str) -> "Manifest":
        return Manifest([s for s in self.samples if s.split == name])


def count_labels(samples) -> dict:
    c = Counter(s.label for s in samples)
    return {k: c.get(k, 0) for k in sorted(CLASS_NAMES)}


def load_manifest(path, verify_files: bool = True, base_dir=None) -> Manifest:
    """Parse a CSV manifest with header ``image_path,label,split[,mask_path]``.

    Relative paths resolve against ``base_dir`` (default: the manifest's
    directory). Line numbers in errors count the header as line 1.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    base = Path(base_dir) if base_dir is not None else path.parent
    if not base.is_dir():
        raise MissingFile(base)
    samples = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedRow(1, "empty file") from None
        header = [h.strip() for h in header]
        if header[:3] != list(MANIFEST_COLUMNS[:3]) or len(header) > 4 or (
            len(header) == 4 and header[3] != "mask_path"
        ):
            raise MalformedRow(1, f"bad header {header}")
        has_mask = len(header) == 4
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise MalformedRow(line, f"expected {len(header)} fields, got {len(row)}")
            image_path, label_s, split = (c.strip() for c in row[:3])
            mask_path = row[3].strip() if has_mask else ""
            try:
                label = int(label_s)
            except ValueError:
                raise MalformedRow(line, f"label {label_s!r} is not an integer") from None
            if label not in CLASS_NAMES:
                raise MalformedRow(line, f"label {label} outside {{0,1,2}}")
            if split not in SPLITS:
                raise MalformedRow(line, f"split {split!r} not in {SPLITS}")
            if not image_path:
                raise MalformedRow(line, "empty image_path")
            if (split, image_path) in seen:
                raise MalformedRow(line, f"duplicate image_path {image_path!r} in split {split}")
            seen.add((split, image_path))
            image_file = base / image_path
            mask_file = base / mask_path if mask_path else None
            if verify_files:
                if not image_file.is_file():
                    raise DanglingReference(image_file, line)
                if mask_file is not None and not mask_file.is_file():
                    raise DanglingReference(mask_file, line)
            samples.append(
                FundusSample(image_file, label, mask_file, split, sample_id=image_path)
            )
    return Manifest(samples)


def write_manifest(manifest: Manifest, path, base_dir=None) -> None:
    path = Path(path)
    base = Path(base_dir) if base_dir is not None else path.parent
    with_mask = any(s.roi_mask_ref is not None for s in manifest.samples)
    cols = MANIFEST_COLUMNS if with_mask else MANIFEST_COLUMNS[:3]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for s in manifest.samples:
            if isinstance(s.image_ref, np.ndarray):
                raise DataError(f"sample {s.sample_id} has no file to reference")
            row = [_relpath(s.image_ref, base), s.label, s.split]
            if with_mask:
                m = s.roi_mask_ref
                row.append("" if m is None else _relpath(m, base))
            w.writerow(row)


def _relpath(p, base: Path) -> str:
    p = Path(p)
    try:
        return p.resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return p.as_posix()


def load_image(ref: ImageRef) -> np.ndarray:
    """Decode to H x W x 3 uint8."""
    if isinstance(ref, np.ndarray):
        img = ref
    else:
        p = Path(ref)
        if not p.is_file():
            raise MissingFile(p)
        with Image.open(p) as im:
            img = np.asarray(im.convert("RGB"))
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise DataError(f"expected HxWx3 uint8 image, got {img.shape} {img.dtype}")
    if img.shape[0] < MIN_SIDE or img.shape[1] < MIN_SIDE:
        raise DataError(f"image {img.shape[:2]} smaller than {MIN_SIDE}x{MIN_SIDE}")
    return img


def load_mask(ref: ImageRef) -> np.ndarray:
    if isinstance(ref, np.ndarray):
        m = ref
    else:
        p = Path(ref)
        if not p.is_file():
            raise MissingFile(p)
        with Image.open(p) as im:
            m = np.asarray(im.convert("L"))
    if m.ndim == 3:
        m = m.max(axis=2)
    return m > 0


def save_png(path, array: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if array.dtype == bool:
        array = array.astype(np.uint8) * 255
    Image.fromarray(array).save(path, format="PNG")


# --- synthetic data --------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 128
    disc_radius_frac: float = 0.12
    cdr: float = 0.3
    noise_sigma: float = 6.0
    seed: int = 0
    # (row, col) in pixels; None draws a position from the seed
    disc_center: Optional[tuple] = None
    brightness: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.cdr <= 1.0:
            raise ConfigError(f"cdr must lie in [0, 1], got {self.cdr}")
        if not 0.0 < self.disc_radius_frac < 0.5:
            raise ConfigError(f"disc_radius_frac must lie in (0, 0.5), got {self.disc_radius_frac}")
        if self.image_size < MIN_SIDE:
            raise ConfigError(f"image_size must be >= {MIN_SIDE}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")


def label_for_cdr(cdr: float) -> int:
    if cdr >= POSITIVE_CDR:
        return POSITIVE
    if cdr >= SUSPECT_CDR:
        return SUSPECT
    return NEGATIVE


_FIELD_RGB = np.array([150.0, 62.0, 32.0])
_VESSEL_RGB = np.array([95.0, 25.0, 15.0])
_DISC_RGB = np.array([228.0, 170.0, 105.0])
_CUP_RGB = np.array([255.0, 238.0, 200.0])


def _coverage(dist: np.ndarray, radius: float) -> np.ndarray:
    # one-pixel anti-aliased edge
    return np.clip(radius - dist + 0.5, 0.0, 1.0)[..., None]


def generate_synthetic(spec: SyntheticSpec, split: str = "train", sample_id: str = "") -> FundusSample:
    """Render a fundus-like image with an optic disc and cup.

    The label follows the cup-to-disc ratio (see ``label_for_cdr``); the
    returned sample carries the disc mask in memory.
    """
    rng = np.random.default_rng(spec.seed)
    s = spec.image_size
    rows, cols = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    c0 = s / 2.0
    field_r = 0.47 * s
    r_field = np.hypot(rows - c0, cols - c0)

    disc_r = spec.disc_radius_frac * s
    if spec.disc_center is None:
        reach = max(field_r - disc_r - 2.0, 0.0) * 0.6
        ang = rng.uniform(0, 2 * np.pi)
        dist = reach * np.sqrt(rng.uniform(0, 1))
        center = (c0 + dist * np.sin(ang), c0 + dist * np.cos(ang))
    else:
        center = (float(spec.disc_center[0]), float(spec.disc_center[1]))

    shade = np.clip(1.0 - 0.35 * (r_field / field_r) ** 2, 0.0, 1.0)[..., None]
    img = shade * _FIELD_RGB * spec.brightness

    # vessels radiating from the disc
    for _ in range(4):
        ang = rng.uniform(0, 2 * np.pi)
        bend = rng.uniform(-0.6, 0.6)
        t = np.linspace(0, 1.2 * field_r, 200)
        vr = center[0] + t * np.sin(ang + bend * t / field_r)
        vc = center[1] + t * np.cos(ang + bend * t / field_r)
        ir, ic = vr.astype(int), vc.astype(int)
        ok = (ir >= 0) & (ir < s) & (ic >= 0) & (ic < s)
        width = max(1, s // 96)
        for dr in range(-width + 1, width):
            rr = np.clip(ir[ok] + dr, 0, s - 1)
            img[rr, ic[ok]] = 0.5 * img[rr, ic[ok]] + 0.5 * _VESSEL_RGB

    d = np.hypot(rows - center[0], cols - center[1])
    disc_cov = _coverage(d, disc_r)
    img = img * (1 - disc_cov) + disc_cov * _DISC_RGB * spec.brightness
    cup_cov = _coverage(d, spec.cdr * disc_r)
    img = img * (1 - cup_cov) + cup_cov * _CUP_RGB * spec.brightness

    img = img * _coverage(r_field, field_r)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape) * (r_field <= field_r)[..., None]
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    mask = d <= disc_r
    return FundusSample(
        img, label_for_cdr(spec.cdr), mask, split, sample_id or f"syn-{spec.seed}"
    )


# cdr bands per class used when drawing a balanced cohort
CDR_BANDS = {NEGATIVE: (0.15, 0.45), SUSPECT: (0.57, 0.68), POSITIVE: (0.75, 0.92)}


def synthetic_cohort(
    n: int,
    seed: int = 0,
    image_size: int = 128,
    val_fraction: float = 0.2,
    test_fraction: float = 0.0,
    disc_radius_range: tuple = (0.11, 0.12),
    noise_sigma: float = 6.0,
    brightness_range: tuple = (0.85, 1.1),
) -> Manifest:
    """Balanced tri-class synthetic cohort with stratified split tags."""
    root = np.random.SeedSequence(seed)
    rng = np.random.default_rng(root.spawn(1)[0])
    samples = []
    by_class = {k: [] for k in CLASS_NAMES}
    for k in range(n):
        by_class[k % 3].append(k)
    split_of = {}
    for label, idx in by_class.items():
        order = rng.permutation(idx)
        n_val = int(round(val_fraction * len(order)))
        n_test = int(round(test_fraction * len(order)))
        for pos, k in enumerate(order):
            split_of[k] = "val" if pos < n_val else "test" if pos < n_val + n_test else "train"
    for k in range(n):
        label = k % 3
        lo, hi = CDR_BANDS[label]
        spec = SyntheticSpec(
            image_size=image_size,
            disc_radius_frac=float(rng.uniform(*disc_radius_range)),
            cdr=float(rng.uniform(lo, hi)),
            noise_sigma=noise_sigma,
            seed=int(rng.integers(0, 2**31 - 1)),
            brightness=float(rng.uniform(*brightness_range)),
        )
        sample = generate_synthetic(spec, split_of[k], sample_id=f"syn-{seed}-{k:05d}")
        assert sample.label == label
        samples.append(sample)
    return Manifest(samples)


# --- rebalancing -----------------------------------------------------------


def resample_balanced(manifest: Manifest, seed: int, num_classes: int = 3) -> np.ndarray:
    """One epoch of class-balanced sample indices.

    Every class contributes as many draws as the largest class. Minority
    classes are tiled whole and topped up with a seeded draw, so each
    original sample appears at least floor(max/n_c) times.
    """
    labels = manifest.labels
    if num_classes == 2:
        labels = (labels > 0).astype(np.int64)
    per_class = [np.flatnonzero(labels == c) for c in range(num_classes)]
    for c, idx in enumerate(per_class):
        if idx.size == 0:
            raise EmptyClass(c)
    target = max(idx.size for idx in per_class)
    rng = np.random.default_rng(seed)
    chunks = []
    for idx in per_class:
        reps, rem = divmod(target, idx.size)
        chunks.append(np.tile(idx, reps))
        if rem:
            chunks.append(rng.choice(idx, size=rem, replace=False))
    seq = np.concatenate(chunks)
    return seq[rng.permutation(seq.size)]
