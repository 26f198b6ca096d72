"""Exact t-SNE for embedding export (n up to a few thousand)."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import DataError, TooFewSamples


def _sq_dists(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _row_affinities(d_row: np.ndarray, target_entropy: float, tol=1e-5, max_iter=100):
    """Gaussian conditional affinities with entropy matched by bisection on beta."""
    d = d_row - d_row.min()  # shift invariance; keeps the largest term at 1
    beta, lo, hi = 1.0, 0.0, np.inf
    for _ in range(max_iter):
        p = np.exp(-d * beta)
        s = p.sum()
        p = p / s
        h = np.log(s) + beta * (d * p).sum()
        if abs(h - target_entropy) < tol:
            break
        if h > target_entropy:
            lo = beta
            beta = beta * 2 if hi == np.inf else (beta + hi) / 2
        else:
            hi = beta
            beta = (beta + lo) / 2
    return p


def effective_perplexity(n: int, perplexity: float = 30.0) -> float:
    return min(perplexity, (n - 1) / 3.0)


def joint_affinities(x: np.ndarray, perplexity: float = 30.0) -> np.ndarray:
    """Symmetrized high-dimensional affinities P (n x n, sums to 1)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    d = _sq_dists(x)
    target = np.log(effective_perplexity(n, perplexity))
    cond = np.zeros((n, n))
    for i in range(n):
        others = np.r_[0:i, i + 1:n]
        cond[i, others] = _row_affinities(d[i, others], target)
    p = (cond + cond.T) / (2.0 * n)
    return p


def tsne(x, perplexity: float = 30.0, seed: int = 0, n_iter: int = 1000,
         early_exaggeration: float = 12.0, exaggeration_iters: int = 250) -> np.ndarray:
    """2-D t-SNE coordinates; deterministic for a fixed seed."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 3:
        raise TooFewSamples(f"t-SNE needs at least 3 samples, got {n}")
    if not np.isfinite(x).all():
        raise DataError("embeddings must be finite")
    p = np.maximum(joint_affinities(x, perplexity), 1e-12)
    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    lr = max(n / early_exaggeration / 4.0, 50.0)
    for it in range(n_iter):
        exag = early_exaggeration if it < exaggeration_iters else 1.0
        momentum = 0.5 if it < exaggeration_iters else 0.8
        num = 1.0 / (1.0 + _sq_dists(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        w = (exag * p - q) * num
        grad = 4.0 * (w.sum(axis=1)[:, None] * y - w @ y)
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        update = momentum * update - lr * gains * grad
        y = y + update
        y = y - y.mean(axis=0)
    return y


def tsne_export(embeddings, labels, perplexity: float = 30.0, seed: int = 0, n_iter: int = 1000):
    labels = np.asarray(labels)
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] != labels.shape[0]:
        raise DataError("need one embedding row per label")
    return tsne(emb, perplexity, seed, n_iter)


def write_tsne_csv(path, ids, coords, labels) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y", "label"])
        for i, (cx, cy), lab in zip(ids, coords, labels):
            w.writerow([i, repr(float(cx)), repr(float(cy)), int(lab)])
