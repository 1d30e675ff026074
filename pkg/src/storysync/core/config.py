"""Run configuration shared by every module."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

CONFIG_VERSION = 1

# Fields that change parameter shapes or story layout. A checkpoint whose
# snapshot disagrees with the requested config on any of these is refused.
STRUCTURAL_FIELDS = (
    "image_size",
    "latent_channels",
    "unet_channels",
    "attention_levels",
    "text_dim",
    "num_heads",
    "num_frames",
    "max_text_len",
    "resampler_tokens",
    "resampler_depth",
    "ref_size",
    "id_dim",
    "patch_size",
    "image_feat_dim",
    "vocab_version",
)


@dataclass(frozen=True)
class ModelConfig:
    # backbone
    image_size: int = 64
    latent_channels: int = 3
    unet_channels: tuple[int, ...] = (64, 128, 128)
    attention_levels: tuple[int, ...] = (1, 2)
    text_dim: int = 64
    num_heads: int = 4
    max_text_len: int = 16
    vocab_version: int = 1

    # story layout
    num_frames: int = 4

    # synchronizer
    amsa: bool = True
    mask_weight: float = 0.1
    mask_eps: float = 1e-6

    # injector
    resampler_tokens: int = 16
    resampler_depth: int = 2
    ref_size: int = 32
    id_dim: int = 64
    patch_size: int = 8
    image_feat_dim: int = 64
    reference_strategy: str = "srs"

    # diffusion
    train_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 30
    guidance_scale: float = 7.0
    cond_dropout: float = 0.05

    # optimisation
    lr_backbone: float = 2e-4
    lr_synchronizer: float = 5e-5
    lr_injector: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 1
    seed: int = 1234

    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.mask_weight < 0:
            raise ValueError(f"mask_weight must be >= 0, got {self.mask_weight}")
        if not 0.0 < self.mask_eps < 1.0:
            raise ValueError(f"mask_eps must lie in (0, 1), got {self.mask_eps}")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ValueError(f"cond_dropout must lie in [0, 1], got {self.cond_dropout}")
        if self.guidance_scale < 1.0:
            raise ValueError("guidance_scale below 1 is not supported")
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")
        if self.reference_strategy not in ("srs", "stacked"):
            raise ValueError(f"unknown reference_strategy {self.reference_strategy!r}")
        if self.text_dim % self.num_heads:
            raise ValueError("text_dim must be divisible by num_heads")
        for c in self.unet_channels:
            if c % self.num_heads or c % 8:
                raise ValueError(f"channel width {c} must be divisible by num_heads and 8")
        if any(not 0 <= lvl < len(self.unet_channels) for lvl in self.attention_levels):
            raise ValueError("attention_levels out of range")
        if self.image_size % (2 ** (len(self.unet_channels) - 1)):
            raise ValueError("image_size must be divisible by the total downsampling factor")
        if self.ref_size % self.patch_size:
            raise ValueError("ref_size must be a multiple of patch_size")

    @property
    def guidance_enabled(self) -> bool:
        return self.guidance_scale > 1.0

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["unet_channels"] = list(self.unet_channels)
        d["attention_levels"] = list(self.attention_levels)
        d["config_version"] = CONFIG_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        version = d.pop("config_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ValueError(f"config version {version} is not supported (expected {CONFIG_VERSION})")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key in ("unet_channels", "attention_levels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def structural_mismatch(self, other: "ModelConfig") -> list[str]:
        return [
            f"{name}: {getattr(other, name)!r} != {getattr(self, name)!r}"
            for name in STRUCTURAL_FIELDS
            if getattr(self, name) != getattr(other, name)
        ]

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path) -> ModelConfig:
    """Read a JSON or YAML config file; missing keys fall back to defaults."""
    import pathlib

    path = pathlib.Path(path)
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    return ModelConfig.from_dict(data)
