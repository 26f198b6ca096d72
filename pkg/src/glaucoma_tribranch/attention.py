"""CBAM and the knowledge-enhanced variant fed by prior embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BatchMismatch, ConfigError, DimMismatch


@dataclass
class AttentionMaps:
    channel_weights: torch.Tensor  # B x C
    spatial_weights: torch.Tensor  # B x 1 x H x W
    knowledge_weights: Optional[torch.Tensor] = None  # B x C
    fused: Optional[torch.Tensor] = None  # B x 1 x H x W

    def all_maps(self):
        return [m for m in (self.channel_weights, self.spatial_weights,
                            self.knowledge_weights, self.fused) if m is not None]


def reduced_channels(channels: int, reduction: int) -> int:
    if reduction < 1 or channels % reduction:
        raise DimMismatch(f"channels {channels} not divisible by reduction ratio {reduction}")
    return channels // reduction


class ChannelAttention(nn.Module):
    def __init__(self, channels, reduction=16):
        super().__init__()
        hidden = reduced_channels(channels, reduction)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=False),
            nn.Conv2d(hidden, channels, 1),
        )

    def forward(self, x):
        avg = F.adaptive_avg_pool2d(x, 1)
        mx = F.adaptive_max_pool2d(x, 1)
        return torch.sigmoid(self.mlp(avg) + self.mlp(mx))


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size=7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def forward(self, x):
        avg = x.mean(dim=1, keepdim=True)
        mx = x.amax(dim=1, keepdim=True)
        return torch.sigmoid(self.conv(torch.cat([avg, mx], dim=1)))


class CBAM(nn.Module):
    """Sequential channel then spatial gating."""

    def __init__(self, channels, reduction=16, kernel_size=7):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(kernel_size)

    def forward(self, x, prior=None):
        cw = self.channel(x)
        x = x * cw
        sw = self.spatial(x)
        return x * sw, AttentionMaps(cw.flatten(1), sw)


class KnowledgeProjection(nn.Module):
    """sigmoid(W2 relu(W1 f_rf)): prior embedding -> per-channel weights."""

    def __init__(self, prior_dim, channels, reduction=16):
        super().__init__()
        self.prior_dim = prior_dim
        hidden = reduced_channels(channels, reduction)
        self.w1 = nn.Linear(prior_dim, hidden, bias=False)
        self.w2 = nn.Linear(hidden, channels, bias=False)

    def forward(self, f_rf):
        if f_rf.ndim != 2 or f_rf.shape[1] != self.prior_dim:
            raise DimMismatch(
                f"prior embedding must be B x {self.prior_dim}, got {tuple(f_rf.shape)}"
            )
        return torch.sigmoid(self.w2(F.relu(self.w1(f_rf))))


class KECBAM(nn.Module):
    """CBAM whose output is re-gated by a map fused from CBAM features and
    broadcast knowledge weights."""

    def __init__(self, channels, prior_dim, reduction=16, kernel_size=7):
        super().__init__()
        hidden = reduced_channels(channels, reduction)
        self.cbam = CBAM(channels, reduction, kernel_size)
        self.projection = KnowledgeProjection(prior_dim, channels, reduction)
        self.fuse_in = nn.Conv2d(2 * channels, hidden, 1)
        self.fuse_out = nn.Conv2d(hidden, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x, prior=None):
        if prior is None:
            raise DimMismatch("KE-CBAM needs a prior embedding")
        if prior.shape[0] != x.shape[0]:
            raise BatchMismatch(f"feature batch {x.shape[0]} vs prior batch {prior.shape[0]}")
        f_cbam, maps = self.cbam(x)
        w_global = self.projection(prior)
        g_exp = w_global[:, :, None, None].expand_as(f_cbam)
        fused = torch.sigmoid(self.fuse_out(F.relu(self.fuse_in(torch.cat([f_cbam, g_exp], dim=1)))))
        maps.knowledge_weights = w_global
        maps.fused = fused
        return f_cbam * fused, maps


def make_attention(mode, channels, prior_dim=1024, reduction=16):
    if mode == "none":
        return None
    if mode == "cbam":
        return CBAM(channels, reduction)
    if mode == "ke_cbam":
        return KECBAM(channels, prior_dim, reduction)
    raise ConfigError(f"unknown attention mode {mode!r}")
