"""Retinal prior encoders and the on-disk embedding cache.

Cache format (``.npz``):
  ``header``      0-d unicode array holding JSON
                  ``{"format": "tribranch-prior-cache", "version": 1,
                  "encoder": <identity>, "dim": d_rf}``
  ``ids``         1-d unicode array of image ids
  ``embeddings``  float32 array, len(ids) x d_rf
"""

from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np

from .errors import DataError, DimMismatch, MissingFile

CACHE_FORMAT = "tribranch-prior-cache"
CACHE_VERSION = 1
STUB_SEED = 20240917


class StubPriorEncoder:
    """Fixed random projection of a 16x16 grayscale thumbnail.

    Deterministic stand-in for a foundation-model encoder; the projection
    matrix depends only on (dim, seed, grid).
    """

    def __init__(self, dim: int = 1024, seed: int = STUB_SEED, grid: int = 16):
        self.dim = dim
        self.seed = seed
        self.grid = grid
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((grid * grid, dim)) / grid

    @property
    def identity(self) -> str:
        return f"stub-v1:seed={self.seed}:grid={self.grid}"

    def __call__(self, image: np.ndarray, sample_id: str = "") -> np.ndarray:
        gray = cv2.cvtColor(np.ascontiguousarray(image), cv2.COLOR_RGB2GRAY)
        thumb = cv2.resize(gray, (self.grid, self.grid), interpolation=cv2.INTER_AREA)
        v = thumb.astype(np.float64).ravel() / 255.0 - 0.5
        return (v @ self._proj).astype(np.float32)


class FileLookupPriorEncoder:
    """Serves precomputed embeddings keyed by image id."""

    def __init__(self, path):
        header, table = load_prior_cache(path)
        self.path = str(path)
        self.dim = header["dim"]
        self.identity = header["encoder"]
        self._table = table

    def __contains__(self, sample_id):
        return sample_id in self._table

    def __call__(self, image=None, sample_id: str = "") -> np.ndarray:
        try:
            return self._table[sample_id]
        except KeyError:
            raise DataError(f"no prior embedding for {sample_id!r} in {self.path}") from None


def save_prior_cache(path, ids, embeddings, encoder_identity: str) -> None:
    embeddings = np.asarray(embeddings, dtype=np.float32)
    if embeddings.ndim != 2 or embeddings.shape[0] != len(ids):
        raise DimMismatch(f"expected {len(ids)} x d embeddings, got {embeddings.shape}")
    if not np.isfinite(embeddings).all():
        raise DataError("prior embeddings must be finite")
    header = {
        "format": CACHE_FORMAT,
        "version": CACHE_VERSION,
        "encoder": encoder_identity,
        "dim": int(embeddings.shape[1]),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)),
                 ids=np.array(list(ids), dtype=str), embeddings=embeddings)


def load_prior_cache(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        ids = [str(i) for i in z["ids"]]
        emb = z["embeddings"]
    if header.get("format") != CACHE_FORMAT:
        raise DataError(f"{path} is not a prior cache")
    if header.get("version") != CACHE_VERSION:
        raise DataError(f"unsupported prior cache version {header.get('version')}")
    if emb.shape != (len(ids), header["dim"]):
        raise DataError(f"prior cache {path} is inconsistent with its header")
    return header, {i: emb[k] for k, i in enumerate(ids)}
