"""PNG renderings of ROC curves, confusion matrices and DWM selections."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import CLASS_NAMES  # noqa: E402

BINARY_NAMES = {0: "Non-referable", 1: "Referable"}


def class_names(report) -> list:
    names = BINARY_NAMES if report.mode == "binary" else CLASS_NAMES
    return [names[c] for c in range(report.num_classes)]


def plot_roc(report, path) -> None:
    names = class_names(report)
    fig, ax = plt.subplots(figsize=(4.5, 4.5), dpi=100)
    for c, pts in sorted(report.roc.items()):
        pts = np.asarray([p[:2] for p in pts], dtype=np.float64)
        auc = report.per_class[c]["auc"]
        ax.plot(pts[:, 0], pts[:, 1], label=f"{names[c]} (AUC {auc:.3f})")
    ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    title = "ROC" if report.auc is None else f"ROC, macro AUC {report.auc:.3f}"
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    _save(fig, path)


def plot_confusion(report, path) -> None:
    names = class_names(report)
    norm = np.asarray(report.confusion_normalized)
    raw = np.asarray(report.confusion)
    fig, ax = plt.subplots(figsize=(4.5, 4.0), dpi=100)
    im = ax.imshow(norm, vmin=0, vmax=1, cmap="viridis")
    for i in range(norm.shape[0]):
        for j in range(norm.shape[1]):
            ax.text(j, i, f"{norm[i, j]:.2f}\n({raw[i, j]})", ha="center", va="center",
                    color="white" if norm[i, j] < 0.5 else "black", fontsize=8)
    ax.set_xticks(range(len(names)), names, fontsize=8)
    ax.set_yticks(range(len(names)), names, fontsize=8)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    fig.colorbar(im, ax=ax, fraction=0.046)
    _save(fig, path)


def draw_selections(image: np.ndarray, selections) -> np.ndarray:
    """Copy of ``image`` with each crop rectangle outlined, best first in red."""
    import cv2

    out = np.ascontiguousarray(image.copy())
    colors = [(255, 0, 0), (255, 200, 0), (0, 200, 255), (0, 255, 0), (255, 0, 255)]
    for k, s in reversed(list(enumerate(selections))):
        top, left, bottom, right = s.crop_rect
        cv2.rectangle(out, (left, top), (max(right - 1, left), max(bottom - 1, top)),
                      colors[k % len(colors)], 1)
    return out


def _save(fig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
