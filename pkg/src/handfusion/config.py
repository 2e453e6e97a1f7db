"""Dataclass configs shared by the model stack, training and the CLI."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import torch

from .errors import ValidationError

ABLATIONS = ("full", "without_ppzp", "without_graph", "without_3dmesh")


@dataclass(frozen=True)
class ModelConfig:
    """Sizes and wiring switches for the denoiser + hand-conditioner stack.

    Defaults are the toy desk-scale setup: 256x256 images, 64x64 latents
    (factor-4 codec), 64x64 hand crops, 50 diffusion steps.
    :meth:`paper_scale` gives the full-scale geometry (512 images, 225
    crops, 1000 steps); it is not runnable in minutes, only consistent.
    """

    image_size: int = 256
    latent_factor: int = 4
    latent_channels: int = 4
    base_channels: int = 24
    channel_mults: tuple = (1, 2, 2)
    norm_groups: int = 8
    heads: int = 4
    text_dim: int = 128
    cond_width: int = 128
    cond_heads: int = 4
    down_grid: int = 16
    mid_grid: int = 8
    hand_crop: int = 64
    depth_patch: int = 4
    timesteps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ablation: str = "full"
    inject_after_xattn: bool = True
    cross_pairing: tuple = ((0, 1), (1, 2), (2, 0))
    dtype: str = "float32"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValidationError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.image_size % self.latent_factor:
            raise ValidationError("image_size must be divisible by latent_factor")
        if self.hand_crop % self.depth_patch:
            raise ValidationError("hand_crop must be divisible by depth_patch")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.timesteps < 1:
            raise ValidationError("timesteps must be positive")
        object.__setattr__(self, "channel_mults", tuple(self.channel_mults))
        object.__setattr__(
            self, "cross_pairing", tuple(tuple(p) for p in self.cross_pairing)
        )

    @property
    def latent_size(self):
        return self.image_size // self.latent_factor

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    @classmethod
    def paper_scale(cls, **overrides):
        base = dict(
            image_size=512,
            hand_crop=225,
            timesteps=1000,
            base_channels=32,
        )
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; toy defaults, paper values via :meth:`paper_scale`."""

    steps: int = 2000
    lr: float = 1e-4
    batch: int = 4
    lambda_rehand: float = 0.1
    ablation: str = "full"
    seed: int = 0
    optimizer: str = "sgd"
    fusion_enabled: bool = True
    control_enabled: bool = True
    train_base: bool = False
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.steps <= 0:
            raise ValidationError("steps must be positive")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if self.batch <= 0:
            raise ValidationError("batch must be positive")
        if self.lambda_rehand < 0:
            raise ValidationError("lambda_rehand must be nonnegative")
        if self.ablation not in ABLATIONS:
            raise ValidationError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.model.ablation != self.ablation:
            object.__setattr__(self, "model", dataclasses.replace(self.model, ablation=self.ablation))

    @classmethod
    def paper_scale(cls, **overrides):
        base = dict(steps=90_000, lr=1e-6, batch=6, model=ModelConfig.paper_scale())
        base.update(overrides)
        return cls(**base)


def to_json_dict(cfg):
    def convert(v):
        if dataclasses.is_dataclass(v):
            return {f.name: convert(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [convert(x) for x in v]
        return v

    return convert(cfg)


def train_config_from_dict(data):
    data = dict(data)
    model_data = data.pop("model", {})
    if model_data:
        model_data = {
            k: tuple(tuple(p) if isinstance(p, list) else p for p in v) if isinstance(v, list) else v
            for k, v in model_data.items()
        }
        data["model"] = ModelConfig(**model_data)
    return TrainConfig(**data)


def config_hash(cfg):
    """Stable hash of a config dataclass; stored in checkpoints and run records."""
    blob = json.dumps(to_json_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
