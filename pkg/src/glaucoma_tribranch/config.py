"""Run configuration: one YAML document covering data, preprocessing, model and training.

Unknown keys are rejected at every nesting level. ``schema_version`` must
match ``SCHEMA_VERSION``.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .backbone import BackboneConfig
from .dataset import PreprocessConfig
from .dwm import DwmConfig
from .errors import ConfigError, MissingFile
from .model import ModelConfig
from .preprocess import AugmentationPolicy
from .training import TrainConfig

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SyntheticConfig:
    n: int = 600
    image_size: int = 128
    seed: int = 0
    val_fraction: float = 0.2
    test_fraction: float = 0.0
    noise_sigma: float = 6.0
    disc_radius_range: tuple[float, float] = (0.11, 0.12)
    brightness_range: tuple[float, float] = (0.85, 1.1)


@dataclass(frozen=True)
class DataConfig:
    # CSV manifest to ingest; ignored when a synthetic block is given
    manifest: Optional[str] = None
    # base directory for manifest-relative image paths (default: manifest dir)
    image_root: Optional[str] = None
    synthetic: Optional[SyntheticConfig] = field(default_factory=SyntheticConfig)


@dataclass(frozen=True)
class PriorConfig:
    kind: str = "stub"  # "stub" or "file"
    seed: int = 20240917
    cache: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("stub", "file"):
            raise ConfigError("prior.kind must be 'stub' or 'file'")
        if self.kind == "file" and not self.cache:
            raise ConfigError("prior.kind 'file' needs prior.cache")


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")


# --- dict conversion -------------------------------------------------------


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    return obj


def from_dict(cls, data, path="config"):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {k: _convert(hints[k], v, f"{path}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from None


def _convert(tp, value, path):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, path) for v in value)
        if args:
            if len(args) != len(value):
                raise ConfigError(f"{path}: expected {len(args)} entries")
            return tuple(_convert(a, v, path) for a, v in zip(args, value))
        return tuple(_deep_tuple(v) for v in value)
    if tp is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return tuple(_deep_tuple(v) for v in value)
    if origin is dict or tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return dict(value)
    if tp is float:
        # YAML 1.1 reads exponent forms without a dot ("1e-4") as strings
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _deep_tuple(v):
    return tuple(_deep_tuple(x) for x in v) if isinstance(v, (list, tuple)) else v


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def parse_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from None
    return from_dict(RunConfig, data or {})


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    return parse_config(path.read_text(encoding="utf-8"))


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")


def model_config_from_dict(data) -> ModelConfig:
    return from_dict(ModelConfig, data, "model")


# --- presets ---------------------------------------------------------------


def desk_config(**overrides) -> RunConfig:
    """Tiny model on 600 synthetic images; trains on CPU in minutes."""
    backbone = BackboneConfig(
        variant="tiny",
        stage_channels=(8, 16, 32, 64),
        stage_blocks=(1, 1, 1, 1),
        embed_dim=32,
        attention="ke_cbam",
        attention_stages=(2, 3, 4),
        reduction=4,
        prior_dim=64,
    )
    cfg = RunConfig(
        model=ModelConfig(backbone=backbone, dwm=DwmConfig(), input_size=64),
        train=TrainConfig(lr=2e-4, iterations=1500, batch_size=16, eval_every=60,
                          checkpoint_every=500, early_stop_patience=10),
        preprocess=PreprocessConfig(augment=AugmentationPolicy(p_apply=0.5, ops=("hflip", "vflip"))),
    )
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def full_config() -> RunConfig:
    """Full-scale protocol: ResNet-152 layout, 299 px inputs, 10,000 iterations."""
    backbone = BackboneConfig.deep152(embed_dim=512, attention="ke_cbam", reduction=16, prior_dim=1024)
    return RunConfig(
        data=DataConfig(manifest="manifest.csv", synthetic=None),
        model=ModelConfig(backbone=backbone, input_size=299),
        train=TrainConfig(),
    )


def with_variant(cfg: RunConfig, name: str) -> RunConfig:
    """Ablation grid: patch5, branch2cbam, branch3cbam, branch3kecbam."""
    m = cfg.model
    if name == "patch5":
        m = dataclasses.replace(m, branches=("global", "dynamic"),
                                backbone=dataclasses.replace(m.backbone, attention="none"),
                                dwm=dataclasses.replace(m.dwm, mode="fixed5"))
    elif name == "branch2cbam":
        m = dataclasses.replace(m, branches=("global", "roi"),
                                backbone=dataclasses.replace(m.backbone, attention="cbam"))
    elif name == "branch3cbam":
        m = dataclasses.replace(m, branches=("global", "roi", "dynamic"),
                                backbone=dataclasses.replace(m.backbone, attention="cbam"))
    elif name == "branch3kecbam":
        m = dataclasses.replace(m, branches=("global", "roi", "dynamic"),
                                backbone=dataclasses.replace(m.backbone, attention="ke_cbam"))
    else:
        raise ConfigError(f"unknown variant {name!r}")
    return dataclasses.replace(cfg, model=m)


PRESETS = {
    "desk": desk_config,
    "full": full_config,
}
VARIANTS = ("patch5", "branch2cbam", "branch3cbam", "branch3kecbam")
