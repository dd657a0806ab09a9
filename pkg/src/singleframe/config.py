from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and objective hyperparameters."""

    vocab_size: int
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    hidden_dim: int = 64
    proj_dim: int = 32
    vision_layers: int = 2
    text_layers: int = 2
    multimodal_layers: int = 2
    temporal_layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    max_text_len: int = 16
    mlm_mask_ratio: float = 0.5
    temperature_init: float = 0.07
    t_train_temporal: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if not 0.0 < self.mlm_mask_ratio < 1.0:
            raise ConfigError("mlm_mask_ratio must lie in (0, 1)")
        if not 0.01 <= self.temperature_init <= 1.0:
            raise ConfigError("temperature_init must lie in the clamp range [0.01, 1.0]")
        if self.vocab_size < 5:
            raise ConfigError("vocab_size must cover the 4 special tokens plus at least one word")
        if self.max_text_len < 2:
            raise ConfigError("max_text_len must leave room for [CLS] and [SEP]")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def vision_len(self) -> int:
        return self.num_patches + 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)
