"""Classification metrics: ROC/AUC, average precision, confusion matrices."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateLabels
from .model import merge_labels, to_binary


def roc_points(y_true, scores):
    """Exact ROC step function: (fpr, tpr, thresholds), starting at (0, 0, inf).

    Tied scores share one threshold, so a tie contributes a diagonal segment
    (half credit under trapezoidal integration).
    """
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    thr = np.r_[np.inf, s[last]]
    return fpr, tpr, thr


def auc_score(y_true, scores) -> float:
    fpr, tpr, _ = roc_points(y_true, scores)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def average_precision(y_true, scores) -> float:
    """Sum over thresholds of (recall increment) x precision."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise DegenerateLabels("AP needs at least one positive sample")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[last]
    precision = tps / (last + 1)
    recall = tps / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def confusion(labels, predicted, k: int):
    """Raw counts (rows = true class) and row-normalized matrix.

    Rows without support stay all-zero in the normalized matrix.
    """
    labels = np.asarray(labels, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if labels.shape != predicted.shape:
        raise ValueError("labels and predictions differ in length")
    if labels.size and (labels.min() < 0 or labels.max() >= k or predicted.min() < 0 or predicted.max() >= k):
        raise ValueError(f"class indices must lie in [0, {k})")
    raw = np.zeros((k, k), dtype=np.int64)
    np.add.at(raw, (labels, predicted), 1)
    support = raw.sum(axis=1, keepdims=True)
    norm = np.divide(raw, support, out=np.zeros((k, k)), where=support > 0)
    return raw, norm


@dataclass
class MetricsReport:
    mode: str
    num_classes: int
    n: int
    accuracy: float
    f1: float
    sensitivity: float
    specificity: float
    ap: Optional[float]
    auc: Optional[float]
    per_class: dict = field(default_factory=dict)
    confusion: list = field(default_factory=list)
    confusion_normalized: list = field(default_factory=list)
    roc: dict = field(default_factory=dict)

    def to_dict(self):
        """Plain JSON-ready dict; the infinite first ROC threshold becomes None."""
        return _finite(asdict(self))


def _finite(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _one_vs_rest(raw: np.ndarray, c: int):
    tp = raw[c, c]
    fn = raw[c].sum() - tp
    fp = raw[:, c].sum() - tp
    tn = raw.sum() - tp - fn - fp
    sen = tp / (tp + fn) if tp + fn else None
    spe = tn / (tn + fp) if tn + fp else None
    prec = tp / (tp + fp) if tp + fp else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else None
    return sen, spe, prec, f1


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def compute_metrics(labels, probs, mode: str = "tri_class") -> MetricsReport:
    """AP/AUC/Acc/F1/Sen/Spe, confusion matrices and ROC points.

    ``mode="binary"`` accepts either two-column probabilities with 0/1
    labels, or tri-class inputs which are merged (Positive and Suspect
    become Referable). Binary Sen/Spe/F1/AP/AUC treat Referable as the
    positive class; tri-class Sen/Spe/F1 are one-vs-rest macro averages.
    """
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0] or labels.size == 0:
        raise ValueError("need one probability row per label and at least one sample")
    if mode == "binary" and probs.shape[1] == 3:
        probs, labels = to_binary(probs), merge_labels(labels)
    elif mode not in ("binary", "tri_class"):
        raise ValueError(f"unknown metrics mode {mode!r}")
    k = probs.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    pred = probs.argmax(axis=1)
    raw, norm = confusion(labels, pred, k)

    per_class, roc = {}, {}
    for c in range(k):
        y = labels == c
        sen, spe, prec, f1 = _one_vs_rest(raw, c)
        entry = {"sensitivity": sen, "specificity": spe, "precision": float(prec), "f1": f1,
                 "support": int(y.sum()), "auc": None, "ap": None}
        if 0 < y.sum() < y.size:
            entry["auc"] = auc_score(y, probs[:, c])
            entry["ap"] = average_precision(y, probs[:, c])
            fpr, tpr, thr = roc_points(y, probs[:, c])
            roc[c] = [[float(a), float(b), float(t)] for a, b, t in zip(fpr, tpr, thr)]
        per_class[c] = {key: (float(v) if isinstance(v, (np.floating, np.integer)) else v)
                        for key, v in entry.items()}

    if mode == "binary":
        pos = per_class[1]
        if pos["auc"] is None:
            raise DegenerateLabels("binary metrics need both referable and non-referable samples")
        ap, auc = pos["ap"], pos["auc"]
        sen, spe, f1 = pos["sensitivity"], pos["specificity"], pos["f1"] or 0.0
    else:
        ap = _mean(per_class[c]["ap"] for c in range(k))
        auc = _mean(per_class[c]["auc"] for c in range(k))
        if auc is None:
            raise DegenerateLabels("no class has both positive and negative samples")
        sen = _mean(per_class[c]["sensitivity"] for c in range(k))
        spe = _mean(per_class[c]["specificity"] for c in range(k))
        f1 = _mean(per_class[c]["f1"] for c in range(k)) or 0.0

    return MetricsReport(
        mode=mode,
        num_classes=k,
        n=int(labels.size),
        accuracy=float(np.trace(raw) / raw.sum()),
        f1=float(f1),
        sensitivity=float(sen) if sen is not None else 0.0,
        specificity=float(spe) if spe is not None else 0.0,
        ap=ap,
        auc=auc,
        per_class=per_class,
        confusion=raw.tolist(),
        confusion_normalized=norm.tolist(),
        roc=roc,
    )
