"""Grad-CAM++ saliency for any stage of any branch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import UnknownLayer

DEFAULT_LAYER = "global.stage4"


@dataclass
class SaliencyMap:
    heatmap: np.ndarray  # H x W in [0, 1]
    target_class: int
    layer_id: str


def resolve_layer(model, layer_id: str):
    """Accepts ``<branch>.stage<k>`` or a full module path."""
    modules = dict(model.named_modules())
    for name in (layer_id, f"encoders.{layer_id}"):
        if name and name in modules:
            return modules[name]
    raise UnknownLayer(f"no layer named {layer_id!r}")


def gradcampp_weights(acts: torch.Tensor, grads: torch.Tensor) -> torch.Tensor:
    """Per-channel weights sum_ij alpha_ij relu(dS/dA_ij), shape B x C.

    alpha = g^2 / (2 g^2 + sum(A) g^3), zero where the denominator vanishes.
    """
    g2, g3 = grads ** 2, grads ** 3
    sum_a = acts.sum(dim=(2, 3), keepdim=True)
    denom = 2 * g2 + sum_a * g3
    alpha = torch.where(denom != 0, g2 / torch.where(denom != 0, denom, torch.ones_like(denom)),
                        torch.zeros_like(denom))
    return (alpha * F.relu(grads)).sum(dim=(2, 3))


def normalize_map(cam: torch.Tensor) -> torch.Tensor:
    """Min-max to [0, 1]; constant maps become all zeros."""
    lo, hi = cam.min(), cam.max()
    if not torch.isfinite(hi - lo) or hi - lo <= 0:
        return torch.zeros_like(cam)
    return (cam - lo) / (hi - lo)


def grad_cam_pp(model, x_global, x_roi=None, prior=None, target_class=None,
                layer_id: str = DEFAULT_LAYER) -> list:
    """One SaliencyMap per sample, upsampled to the global input size.

    ``target_class=None`` explains the predicted class.
    """
    layer = resolve_layer(model, layer_id)
    captured = {}

    def hook(_module, _inp, out):
        captured["acts"] = out

    handle = layer.register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            out = model(x_global, x_roi, prior)
            acts = captured.get("acts")
            if acts is None or acts.ndim != 4:
                raise UnknownLayer(f"layer {layer_id!r} did not produce a convolutional feature map")
            if target_class is None:
                targets = out.logits.argmax(dim=1)
            else:
                targets = torch.full((out.logits.shape[0],), int(target_class), dtype=torch.long)
            score = out.logits.gather(1, targets[:, None]).sum()
            grads, = torch.autograd.grad(score, acts)
    finally:
        handle.remove()
        model.train(was_training)

    acts, grads = acts.detach(), grads.detach()
    weights = gradcampp_weights(acts, grads)
    cams = F.relu((weights[:, :, None, None] * acts).sum(dim=1, keepdim=True))
    cams = F.interpolate(cams, size=tuple(x_global.shape[-2:]), mode="bilinear", align_corners=False)
    maps = []
    for b in range(cams.shape[0]):
        heat = torch.nan_to_num(normalize_map(cams[b, 0]), nan=0.0, posinf=0.0, neginf=0.0)
        maps.append(SaliencyMap(heat.numpy().astype(np.float64), int(targets[b]), layer_id))
    return maps


def overlay(image: np.ndarray, heatmap: np.ndarray, alpha: float = 0.5, cmap: str = "viridis") -> np.ndarray:
    """Blend an RGB uint8 image with a colour-mapped heatmap of the same size."""
    from matplotlib import colormaps

    colors = colormaps[cmap](np.clip(heatmap, 0, 1))[..., :3] * 255.0
    out = (1 - alpha) * image.astype(np.float64) + alpha * colors
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)
