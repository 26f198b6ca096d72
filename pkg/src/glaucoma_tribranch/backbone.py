"""Residual encoder shared by all branches, plus the pool-then-FC embedding head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import make_attention
from .errors import ConfigError, ShapeError

DEEP152_BLOCKS = (3, 8, 36, 3)
ATTENTION_MODES = ("none", "cbam", "ke_cbam")


@dataclass(frozen=True)
class BackboneConfig:
    variant: str = "tiny"
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    stage_blocks: tuple[int, ...] = (1, 1, 1, 1)
    embed_dim: int = 512
    attention: str = "ke_cbam"
    attention_stages: tuple[int, ...] = (2, 3, 4)
    reduction: int = 16
    prior_dim: int = 1024
    stem_channels: Optional[int] = None
    init_gain: float = 0.02
    zero_init_residual: bool = False

    def __post_init__(self):
        if self.variant not in ("tiny", "deep152"):
            raise ConfigError(f"unknown backbone variant {self.variant!r}")
        if len(self.stage_channels) != 4 or len(self.stage_blocks) != 4:
            raise ConfigError("stage_channels and stage_blocks need 4 entries")
        if self.variant == "deep152" and tuple(self.stage_blocks) != DEEP152_BLOCKS:
            raise ConfigError(f"deep152 requires stage_blocks {DEEP152_BLOCKS}")
        if self.variant == "tiny" and not all(1 <= b <= 2 for b in self.stage_blocks):
            raise ConfigError("tiny variant allows 1 or 2 blocks per stage")
        if self.variant == "deep152" and any(c % 4 for c in self.stage_channels):
            raise ConfigError("deep152 stage channels must be multiples of 4")
        if self.embed_dim <= 0:
            raise ConfigError("embed_dim must be positive")
        if self.attention not in ATTENTION_MODES:
            raise ConfigError(f"attention must be one of {ATTENTION_MODES}")
        if not set(self.attention_stages) <= {1, 2, 3, 4}:
            raise ConfigError("attention_stages must be a subset of {1, 2, 3, 4}")
        if self.attention != "none":
            for s in self.attention_stages:
                if self.stage_channels[s - 1] % self.reduction:
                    raise ConfigError(
                        f"stage {s} channels {self.stage_channels[s - 1]} not divisible "
                        f"by reduction {self.reduction}"
                    )

    @classmethod
    def deep152(cls, **kw):
        kw.setdefault("stage_channels", (256, 512, 1024, 2048))
        return cls(variant="deep152", stage_blocks=DEEP152_BLOCKS, **kw)

    @property
    def out_channels(self) -> int:
        return self.stage_channels[3]

    @property
    def stem_width(self) -> int:
        if self.stem_channels is not None:
            return self.stem_channels
        return 64 if self.variant == "deep152" else self.stage_channels[0]


def norm_groups(channels: int) -> int:
    """Largest divisor of channels not above min(32, channels // 4)."""
    cap = max(1, min(32, channels // 4))
    return max(g for g in range(1, cap + 1) if channels % g == 0)


def norm(channels):
    return nn.GroupNorm(norm_groups(channels), channels)


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)


def conv1x1(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 1, stride=stride, bias=False)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = conv3x3(cin, cout, stride)
        self.n1 = norm(cout)
        self.conv2 = conv3x3(cout, cout)
        self.n2 = norm(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(conv1x1(cin, cout, stride), norm(cout))

    @property
    def last_norm(self):
        return self.n2

    def forward(self, x):
        out = F.relu(self.n1(self.conv1(x)))
        out = self.n2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class Bottleneck(nn.Module):
    """1x1 -> 3x3 (strided) -> 1x1, width = cout / 4."""

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        width = cout // 4
        self.conv1 = conv1x1(cin, width)
        self.n1 = norm(width)
        self.conv2 = conv3x3(width, width, stride)
        self.n2 = norm(width)
        self.conv3 = conv1x1(width, cout)
        self.n3 = norm(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(conv1x1(cin, cout, stride), norm(cout))

    @property
    def last_norm(self):
        return self.n3

    def forward(self, x):
        out = F.relu(self.n1(self.conv1(x)))
        out = F.relu(self.n2(self.conv2(out)))
        out = self.n3(self.conv3(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class Stage(nn.Module):
    """Residual blocks followed by the optional attention module.

    The stage output (what hooks on this module see) is the
    attention-modulated feature map.
    """

    def __init__(self, blocks, attention=None):
        super().__init__()
        self.blocks = nn.Sequential(*blocks)
        self.attention = attention

    def forward(self, x, prior=None):
        x = self.blocks(x)
        if self.attention is not None:
            x, _ = self.attention(x, prior)
        return x


class Encoder(nn.Module):
    """Stem (stride 4) and four stages (strides 1, 2, 2, 2): output side is ceil(side / 32)."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        block = Bottleneck if cfg.variant == "deep152" else BasicBlock
        stem = cfg.stem_width
        self.stem = nn.Sequential(
            nn.Conv2d(3, stem, 7, stride=2, padding=3, bias=False),
            norm(stem),
            nn.ReLU(),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        cin = stem
        for k, (cout, n) in enumerate(zip(cfg.stage_channels, cfg.stage_blocks), start=1):
            stride = 1 if k == 1 else 2
            blocks = [block(cin if i == 0 else cout, cout, stride if i == 0 else 1) for i in range(n)]
            att = None
            if (k in cfg.attention_stages):
                att = make_attention(cfg.attention, cout, cfg.prior_dim, cfg.reduction)
            self.add_module(f"stage{k}", Stage(blocks, att))
            cin = cout
        init_weights(self, cfg.init_gain, cfg.zero_init_residual)

    @property
    def needs_prior(self) -> bool:
        return self.cfg.attention == "ke_cbam" and bool(self.cfg.attention_stages)

    def forward(self, x, prior=None, return_stages=False):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"encoder expects B x 3 x H x W input, got {tuple(x.shape)}")
        if min(x.shape[2:]) < 32:
            raise ShapeError(f"input spatial dims must be >= 32, got {tuple(x.shape[2:])}")
        x = self.stem(x)
        stages = {}
        for k in range(1, 5):
            x = getattr(self, f"stage{k}")(x, prior)
            stages[k] = x
        if return_stages:
            return x, stages
        return x


class EmbedHead(nn.Module):
    """Global average pool, then an affine map C -> d."""

    def __init__(self, channels, embed_dim, gain=0.02):
        super().__init__()
        self.fc = nn.Linear(channels, embed_dim)
        init_weights(self, gain)

    def forward(self, f):
        return self.fc(f.mean(dim=(2, 3)))


def init_weights(module: nn.Module, gain: float = 0.02, zero_init_residual: bool = False):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.xavier_uniform_(m.weight, gain=gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.GroupNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    if zero_init_residual:
        for m in module.modules():
            if isinstance(m, (BasicBlock, Bottleneck)):
                nn.init.zeros_(m.last_norm.weight)


def output_side(side: int) -> int:
    """Spatial size after the stem and stages for an input of this side."""
    for _ in range(5):
        side = (side - 1) // 2 + 1
    return side


def stage_side(side: int, stage: int) -> int:
    side = (side - 1) // 2 + 1
    side = (side - 1) // 2 + 1
    for _ in range(stage - 1):
        side = (side - 1) // 2 + 1
    return side


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
