"""Noise schedule, forward diffusion process, frozen latent codec and text embedding.

The codec replaces a trained VAE with a fixed orthogonal patch projection:
``encode`` projects each f x f patch onto a small orthonormal basis whose
first three directions are the per-color patch means, ``decode`` is the
transpose. That keeps the frozen-codec contract (decode(encode(x)) returns
the patch-mean component of x, encode(decode(z)) == z) without any weights.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from . import rng
from .errors import ValidationError
from .layers import sinusoidal_embedding


@dataclass
class NoiseSchedule:
    """Beta schedule and cumulative alpha-bar table of length T."""

    betas: np.ndarray
    alpha_bars: np.ndarray = field(init=False)
    strict: bool = True

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or len(self.betas) < 1:
            raise ValidationError("betas must be a nonempty 1-D array")
        lo, hi = self.betas.min(), self.betas.max()
        if self.strict and not (0.0 < lo and hi < 1.0):
            raise ValidationError(f"betas must lie in (0, 1), got range [{lo}, {hi}]")
        if not self.strict and not (0.0 <= lo and hi <= 1.0):
            raise ValidationError(f"betas must lie in [0, 1], got range [{lo}, {hi}]")
        self.alpha_bars = np.cumprod(1.0 - self.betas)
        if self.strict and not np.all(np.diff(self.alpha_bars) < 0):
            raise ValidationError("alpha_bar must be strictly decreasing")

    @classmethod
    def linear(cls, steps=1000, beta_start=1e-4, beta_end=0.02):
        return cls(betas=np.linspace(beta_start, beta_end, steps))

    @classmethod
    def limit(cls, alpha_bar_value, steps=1):
        """Degenerate one-knob schedule for endpoint tests (alpha_bar 0 or 1)."""
        return cls(betas=np.full(steps, 1.0 - float(alpha_bar_value)), strict=False)

    @property
    def timesteps(self):
        return len(self.betas)


@dataclass
class Latent:
    """A latent grid (C, H, W) at diffusion step ``step`` (0 means clean)."""

    data: torch.Tensor
    step: int = 0

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValidationError(f"latent data must be (C, H, W), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValidationError("latent entries must be finite")
        if self.step < 0:
            raise ValidationError("latent step must be nonnegative")


@dataclass
class ConditionBundle:
    """Everything the conditional denoiser sees besides (z_t, t)."""

    text_embedding: torch.Tensor  # (L, d)
    control_depth: Optional[torch.Tensor] = None  # (1, H_img, W_img) in [0, 1]
    fusion: Optional[object] = None  # FusionFeatureSet

    def __post_init__(self):
        if self.text_embedding.ndim != 2 or self.text_embedding.shape[0] == 0:
            raise ValidationError("text embedding must be a nonempty (L, d) sequence")
        if self.control_depth is not None:
            d = self.control_depth
            if d.ndim != 3 or d.shape[0] != 1:
                raise ValidationError(f"control depth must be (1, H, W), got {tuple(d.shape)}")
            if d.min() < 0 or d.max() > 1:
                raise ValidationError("control depth values must lie in [0, 1]")


def forward_diffuse(z0, t, eps, schedule):
    """z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps for one sample."""
    if not 0 <= t < schedule.timesteps:
        raise ValidationError(f"step index {t} outside [0, {schedule.timesteps})")
    if eps.shape != z0.data.shape:
        raise ValidationError(
            f"noise shape {tuple(eps.shape)} must match latent {tuple(z0.data.shape)}"
        )
    abar = float(schedule.alpha_bars[t])
    data = np.sqrt(abar) * z0.data + np.sqrt(1.0 - abar) * eps
    return Latent(data=data, step=t + 1)


def diffuse_batch(z0, t_indices, eps, schedule):
    """Batched forward diffusion; t_indices is one step index per sample."""
    abar = torch.as_tensor(schedule.alpha_bars, dtype=z0.dtype)[t_indices]
    shape = (-1,) + (1,) * (z0.ndim - 1)
    return abar.sqrt().view(shape) * z0 + (1.0 - abar).sqrt().view(shape) * eps


class PatchCodec:
    """Frozen orthogonal patch-projection codec between images and latents.

    encode: (3, H, W) image in [0, 1] -> (c, H/f, W/f) latent, via a fixed
    row-orthonormal matrix scaled by 1/f. decode is the exact transpose, so
    encode(decode(z)) == z and decode(encode(x)) keeps the patch means.
    """

    def __init__(self, factor=4, latent_channels=4, seed=0):
        if latent_channels < 3 or latent_channels > 3 * factor * factor:
            raise ValidationError("latent_channels must lie in [3, 3*f*f]")
        self.factor = factor
        self.latent_channels = latent_channels
        self.scale = 1.0 / factor
        patch_dim = 3 * factor * factor
        basis = np.zeros((latent_channels, patch_dim))
        for ch in range(3):
            block = np.zeros((3, factor, factor))
            block[ch] = 1.0 / factor
            basis[ch] = block.ravel()
        gen = rng.stream(seed, "codec")
        for row in range(3, latent_channels):
            vec = gen.standard_normal(patch_dim)
            for prev in basis[:row]:
                vec -= (vec @ prev) * prev
            basis[row] = vec / np.linalg.norm(vec)
        self._basis64 = torch.from_numpy(basis)

    def _basis(self, dtype):
        return self._basis64.to(dtype)

    def _check_dims(self, h, w):
        if h % self.factor or w % self.factor:
            raise ValidationError(
                f"image dims ({h}, {w}) must be divisible by factor {self.factor}"
            )

    def encode(self, image):
        if image.ndim != 3 or image.shape[0] != 3:
            raise ValidationError(f"expected (3, H, W) image, got {tuple(image.shape)}")
        _, h, w = image.shape
        self._check_dims(h, w)
        f = self.factor
        patches = (
            image.view(3, h // f, f, w // f, f)
            .permute(1, 3, 0, 2, 4)
            .reshape(h // f * (w // f), 3 * f * f)
        )
        lat = patches @ self._basis(image.dtype).T * self.scale
        return lat.view(h // f, w // f, self.latent_channels).permute(2, 0, 1).contiguous()

    def decode(self, latent):
        if latent.ndim != 3 or latent.shape[0] != self.latent_channels:
            raise ValidationError(
                f"expected ({self.latent_channels}, h, w) latent, got {tuple(latent.shape)}"
            )
        _, lh, lw = latent.shape
        f = self.factor
        flat = latent.permute(1, 2, 0).reshape(lh * lw, self.latent_channels)
        patches = flat @ self._basis(latent.dtype) / self.scale
        image = (
            patches.view(lh, lw, 3, f, f).permute(2, 0, 3, 1, 4).reshape(3, lh * f, lw * f)
        )
        return image.contiguous()


class HashedTextEncoder:
    """Deterministic frozen token embedding shared by the denoiser and conditioner.

    Each token maps to a fixed hash-seeded Gaussian vector; a sinusoidal
    position term distinguishes orderings. No trainable state.
    """

    def __init__(self, dim=128, seed=0):
        self.dim = dim
        self.seed = seed
        self._cache = {}

    @staticmethod
    def tokenize(text):
        tokens = [t for t in "".join(c if c.isalnum() else " " for c in text.lower()).split() if t]
        return tokens

    def _token_vector(self, token):
        if token not in self._cache:
            self._cache[token] = torch.from_numpy(rng.token_embedding(token, self.seed, self.dim))
        return self._cache[token]

    def encode(self, text, dtype=torch.float32):
        tokens = self.tokenize(text) if isinstance(text, str) else list(text)
        if not tokens:
            raise ValidationError("cannot encode an empty token sequence")
        emb = torch.stack([self._token_vector(t) for t in tokens])
        pos = sinusoidal_embedding(torch.arange(len(tokens)), self.dim)
        return (emb + 0.1 * pos).to(dtype)
