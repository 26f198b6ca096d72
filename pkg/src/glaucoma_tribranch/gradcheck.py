"""Central finite-difference checks of autograd parameter gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class GradCheckResult:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray

    def pass_rate(self, tol: float = 1e-2) -> float:
        return float(np.mean(self.rel_error <= tol))


def relative_error(a, n, floor: float = 1e-8) -> np.ndarray:
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(loss_fn, params, n_coords: int = 200, eps: float = 1e-3, seed: int = 0,
                    floor: float = 1e-8) -> GradCheckResult:
    """Compare d loss / d theta against (L(theta+eps) - L(theta-eps)) / (2 eps).

    ``loss_fn()`` must be a deterministic scalar function of ``params``.
    Coordinates are drawn uniformly over the flattened parameter vector.
    """
    params = list(params)
    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    analytic, numeric = [], []
    with torch.no_grad():
        for f in flat:
            k = int(np.searchsorted(offsets, f, side="right") - 1)
            p, i = params[k], int(f - offsets[k])
            view = p.view(-1)
            old = view[i].item()
            view[i] = old + eps
            up = loss_fn().item()
            view[i] = old - eps
            down = loss_fn().item()
            view[i] = old
            numeric.append((up - down) / (2 * eps))
            analytic.append(grads[k].reshape(-1)[i].item())
    analytic, numeric = np.array(analytic), np.array(numeric)
    return GradCheckResult(analytic, numeric, relative_error(analytic, numeric, floor))


def check_model_config():
    """Tri-branch KE-CBAM net small enough for a coordinate-wise check (24,786 parameters)."""
    from .backbone import BackboneConfig
    from .dwm import DwmConfig
    from .model import ModelConfig

    backbone = BackboneConfig(variant="tiny", stage_channels=(4, 8, 8, 16), stage_blocks=(1, 1, 1, 1),
                              embed_dim=8, attention="ke_cbam", attention_stages=(2, 3, 4),
                              reduction=4, prior_dim=12)
    return ModelConfig(backbone=backbone, dwm=DwmConfig(), input_size=64)


def check_tri_branch(cfg=None, eps: float = 1e-3, n_coords: int = 200, seed: int = 0, batch: int = 4,
                     weight_init=None) -> GradCheckResult:
    """Cross-entropy of the full tri-branch forward, float64, seeded random inputs.

    ``weight_init(model)`` may re-initialize the weights; by default the
    model keeps its constructor initialization.
    """
    import torch.nn.functional as F

    from .model import TriBranchNet

    cfg = cfg or check_model_config()
    torch.manual_seed(seed)
    model = TriBranchNet(cfg).double()
    if weight_init is not None:
        weight_init(model)
    g = torch.Generator().manual_seed(seed)
    side = cfg.input_size
    xg = torch.randn(batch, 3, side, side, generator=g, dtype=torch.float64)
    xr = torch.randn(batch, 3, side, side, generator=g, dtype=torch.float64)
    prior = torch.randn(batch, cfg.backbone.prior_dim, generator=g, dtype=torch.float64)
    y = torch.arange(batch) % cfg.num_classes

    def loss():
        return F.cross_entropy(model(xg, xr, prior).logits, y)

    return check_gradients(loss, list(model.parameters()), n_coords=n_coords, eps=eps, seed=seed)


def he_init(model) -> None:
    """He-normal conv/linear weights, zero biases: unit-scale activations for ReLU nets."""
    for m in model.modules():
        if isinstance(m, (torch.nn.Conv2d, torch.nn.Linear)):
            torch.nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                torch.nn.init.zeros_(m.bias)
