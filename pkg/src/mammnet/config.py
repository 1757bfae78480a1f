"""Model, loss and training configuration.

Configs are frozen dataclasses so they can be shared freely and embedded in
checkpoints.  A config file is YAML with optional top-level sections
``model``, ``train`` and ``phantom`` whose keys mirror the dataclass fields.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

ABLATIONS = ("full", "vitd_only", "fpd_only")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 128
    num_object_queries: int = 100
    num_link_queries: int = 50
    num_vitd_blocks: int = 10
    num_heads: int = 8
    fusion_downsample: int = 4
    embed_dim: int = 64
    backbone_channels: tuple[int, ...] = (32, 64, 128, 256)
    mask_dim: int = 64
    ffn_dim: int = 128
    num_link_blocks: int = 2
    ablation: str = "full"

    def __post_init__(self):
        object.__setattr__(self, "backbone_channels", tuple(int(c) for c in self.backbone_channels))
        for name in ("image_size", "num_object_queries", "num_link_queries", "num_vitd_blocks",
                     "num_heads", "fusion_downsample", "embed_dim", "mask_dim", "ffn_dim",
                     "num_link_blocks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim ({self.embed_dim}) must be divisible by num_heads ({self.num_heads})"
            )
        # sine position encodings split channels into x/y sin/cos quarters
        if self.embed_dim % 4:
            raise ConfigError(f"embed_dim ({self.embed_dim}) must be divisible by 4")
        if len(self.backbone_channels) != 4 or min(self.backbone_channels) < 1:
            raise ConfigError(
                f"backbone_channels needs 4 positive entries, got {self.backbone_channels}"
            )
        if self.image_size % 32:
            raise ConfigError(f"image_size ({self.image_size}) must be divisible by 32")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass(frozen=True)
class LossWeights:
    """Matching-cost and loss weights.

    ``class_weight``, ``bce_weight`` and ``dice_weight`` weight both the
    Hungarian matching cost and the matched detection loss.  ``no_object``
    down-weights the cross-entropy of queries assigned to the background
    class.  The three ``lambda_*`` weights combine the top-level terms.
    """

    class_weight: float = 2.0
    bce_weight: float = 5.0
    dice_weight: float = 5.0
    no_object: float = 0.1
    dice_smooth: float = 1e-6
    lambda_det: float = 1.0
    lambda_link: float = 1.0
    lambda_mal: float = 1.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be non-negative, got {getattr(self, f.name)}")
        if self.dice_smooth <= 0:
            raise ConfigError("dice_smooth must be positive")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 5
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    flip: bool = True
    rotation: bool = True
    brightness_contrast: bool = True
    random_scale: bool = True
    loss: LossWeights = field(default_factory=LossWeights)
    max_steps: int = 3000
    seed: int = 0
    checkpoint_every: int = 500
    eval_every: int = 0
    score_floor: float = 0.05
    pair_threshold: float = 0.5

    def __post_init__(self):
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", _build(LossWeights, self.loss, "train.loss"))
        for name in ("batch_size", "learning_rate", "weight_decay"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_steps < 0 or self.seed < 0:
            raise ConfigError("max_steps and seed must be non-negative")
        if self.checkpoint_every < 0 or self.eval_every < 0:
            raise ConfigError("checkpoint_every and eval_every must be non-negative")
        if not 0.0 <= self.score_floor <= 1.0 or not 0.0 <= self.pair_threshold <= 1.0:
            raise ConfigError("score_floor and pair_threshold must lie in [0, 1]")

    @property
    def augment_flags(self) -> dict[str, bool]:
        return {
            "flip": self.flip,
            "rotation": self.rotation,
            "brightness_contrast": self.brightness_contrast,
            "random_scale": self.random_scale,
        }


def _build(cls, values: dict[str, Any] | None, section: str):
    values = dict(values or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    return cls(**values)


def config_to_dict(cfg) -> dict[str, Any]:
    """Plain-python (YAML/JSON friendly) view of a config dataclass."""
    out = dataclasses.asdict(cfg)
    for key, value in out.items():
        if isinstance(value, tuple):
            out[key] = list(value)
    return out


def model_config_from_dict(values: dict[str, Any] | None) -> ModelConfig:
    return _build(ModelConfig, values, "model")


def train_config_from_dict(values: dict[str, Any] | None) -> TrainConfig:
    return _build(TrainConfig, values, "train")


def load_config(path: str | Path | None):
    """Read a YAML config file into ``(ModelConfig, TrainConfig, PhantomConfig)``.

    Missing sections fall back to defaults; ``path=None`` returns all defaults.
    """
    from .datagen import PhantomConfig

    raw: dict[str, Any] = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping at top level")
    unknown = sorted(set(raw) - {"model", "train", "phantom"})
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    return (
        model_config_from_dict(raw.get("model")),
        train_config_from_dict(raw.get("train")),
        _build(PhantomConfig, raw.get("phantom"), "phantom"),
    )


def dump_config(path: str | Path, model=None, train=None, phantom=None) -> None:
    doc = {}
    for key, cfg in (("model", model), ("train", train), ("phantom", phantom)):
        if cfg is not None:
            doc[key] = config_to_dict(cfg)
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))
