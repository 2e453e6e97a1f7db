"""Toy latent denoising UNet with text cross-attention, a trainable
control branch conditioned on the whole-image depth map, and per-scale
sockets where hand-region fusion maps are injected.

Three resolutions (H, H/2, H/4), cross-attention at every resolution.
The control branch mirrors the encoder and feeds zero-initialized 1x1
projections into the decoder skips and the mid state, so a fresh branch
leaves the base output untouched.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import rng
from .errors import ValidationError
from .fusion import FusionInjector
from .layers import MultiheadAttention, sinusoidal_embedding


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, temb_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SpatialCrossAttention(nn.Module):
    """Flattens (B, C, H, W) into tokens and cross-attends into a context sequence."""

    def __init__(self, channels, ctx_dim, heads):
        super().__init__()
        self.norm = nn.GroupNorm(1, channels)
        self.attn = MultiheadAttention(channels, heads, kv_dim=ctx_dim)

    def forward(self, x, ctx):
        b, c, h, w = x.shape
        tokens = self.norm(x).view(b, c, h * w).transpose(1, 2)
        out = self.attn(tokens, ctx)
        return x + out.transpose(1, 2).view(b, c, h, w)


class DenoiseUNet(nn.Module):
    """Base eps-predictor; frozen in the paper-faithful training setup."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.base_channels * m for m in cfg.channel_mults]
        if len(chans) != 3:
            raise ValidationError("channel_mults must define exactly 3 resolutions")
        c0, c1, c2 = chans
        self.chans = chans
        temb_dim = cfg.base_channels * 4
        self.temb_dim = temb_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.base_channels, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim)
        )
        g = cfg.norm_groups
        d_ctx = cfg.text_dim
        self.conv_in = nn.Conv2d(cfg.latent_channels, c0, 3, padding=1)
        self.down0 = ResBlock(c0, c0, temb_dim, g)
        self.attn0 = SpatialCrossAttention(c0, d_ctx, cfg.heads)
        self.pool0 = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.down1 = ResBlock(c0, c1, temb_dim, g)
        self.attn1 = SpatialCrossAttention(c1, d_ctx, cfg.heads)
        self.pool1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.down2 = ResBlock(c1, c2, temb_dim, g)
        self.attn2 = SpatialCrossAttention(c2, d_ctx, cfg.heads)
        self.mid1 = ResBlock(c2, c2, temb_dim, g)
        self.mid_attn = SpatialCrossAttention(c2, d_ctx, cfg.heads)
        self.mid2 = ResBlock(c2, c2, temb_dim, g)
        self.up2 = ResBlock(c2 + c2, c1, temb_dim, g)
        self.uattn2 = SpatialCrossAttention(c1, d_ctx, cfg.heads)
        self.upconv1 = nn.Conv2d(c1, c1, 3, padding=1)
        self.up1 = ResBlock(c1 + c1, c0, temb_dim, g)
        self.uattn1 = SpatialCrossAttention(c0, d_ctx, cfg.heads)
        self.upconv0 = nn.Conv2d(c0, c0, 3, padding=1)
        self.up0 = ResBlock(c0 + c0, c0, temb_dim, g)
        self.uattn0 = SpatialCrossAttention(c0, d_ctx, cfg.heads)
        self.out_norm = nn.GroupNorm(g, c0)
        self.conv_out = nn.Conv2d(c0, cfg.latent_channels, 3, padding=1)

    def time_embedding(self, t):
        emb = sinusoidal_embedding(t, self.cfg.base_channels).to(self.conv_in.weight.dtype)
        return self.time_mlp(emb)

    def _upsample(self, x, conv):
        return conv(F.interpolate(x, scale_factor=2, mode="nearest"))

    def forward(self, z, t, ctx, control=None, fusion_apply=None, hint=None):
        """Predict the noise grid for a batch.

        ``control`` is an optional dict of residuals for the decoder skips
        and mid state; ``fusion_apply`` is an optional callable
        (scale_id, feature) -> feature that performs hand-region injection;
        ``hint`` is an optional tensor added right after conv_in (used by
        the control branch when it reuses this trunk).
        """
        temb = self.time_embedding(t)

        def maybe_fuse(scale, h, at_attn_output):
            if fusion_apply is None:
                return h
            if at_attn_output != self.cfg.inject_after_xattn:
                return h
            return fusion_apply(scale, h)

        h = self.conv_in(z)
        if hint is not None:
            h = h + hint
        h = self.down0(h, temb)
        h = maybe_fuse("down", h, False)
        h = self.attn0(h, ctx)
        h = maybe_fuse("down", h, True)
        s0 = h
        h = self.pool0(h)
        h = self.attn1(self.down1(h, temb), ctx)
        s1 = h
        h = self.pool1(h)
        h = self.attn2(self.down2(h, temb), ctx)
        s2 = h

        h = self.mid1(h, temb)
        h = maybe_fuse("mid", h, False)
        h = self.mid_attn(h, ctx)
        h = maybe_fuse("mid", h, True)
        h = self.mid2(h, temb)

        if control is not None:
            s0 = s0 + control["down0"]
            s1 = s1 + control["down1"]
            s2 = s2 + control["down2"]
            h = h + control["mid"]

        h = self.uattn2(self.up2(torch.cat([h, s2], dim=1), temb), ctx)
        h = self._upsample(h, self.upconv1)
        h = self.uattn1(self.up1(torch.cat([h, s1], dim=1), temb), ctx)
        h = self._upsample(h, self.upconv0)
        h = self.up0(torch.cat([h, s0], dim=1), temb)
        h = maybe_fuse("up", h, False)
        h = self.uattn0(h, ctx)
        h = maybe_fuse("up", h, True)
        return self.conv_out(F.silu(self.out_norm(h)))


class ControlBranch(nn.Module):
    """Trainable encoder copy fed by the whole-image depth map.

    Produces one residual per UNet scale plus a mid residual, each through
    a zero-initialized 1x1 projection (identity-neutral at init).
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        c0, c1, c2 = [cfg.base_channels * m for m in cfg.channel_mults]
        g = cfg.norm_groups
        d_ctx = cfg.text_dim
        temb_dim = cfg.base_channels * 4
        hint_layers = []
        in_ch = 1
        steps = {2: 1, 4: 2, 8: 3}[cfg.latent_factor]
        width = 8
        for _ in range(steps):
            hint_layers += [nn.Conv2d(in_ch, width, 3, stride=2, padding=1), nn.SiLU()]
            in_ch, width = width, width * 2
        hint_layers.append(nn.Conv2d(in_ch, c0, 3, padding=1))
        self.hint_encoder = nn.Sequential(*hint_layers)
        self.conv_in = nn.Conv2d(cfg.latent_channels, c0, 3, padding=1)
        self.down0 = ResBlock(c0, c0, temb_dim, g)
        self.attn0 = SpatialCrossAttention(c0, d_ctx, cfg.heads)
        self.pool0 = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.down1 = ResBlock(c0, c1, temb_dim, g)
        self.attn1 = SpatialCrossAttention(c1, d_ctx, cfg.heads)
        self.pool1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.down2 = ResBlock(c1, c2, temb_dim, g)
        self.attn2 = SpatialCrossAttention(c2, d_ctx, cfg.heads)
        self.mid = ResBlock(c2, c2, temb_dim, g)
        self.zero0 = nn.Conv2d(c0, c0, 1)
        self.zero1 = nn.Conv2d(c1, c1, 1)
        self.zero2 = nn.Conv2d(c2, c2, 1)
        self.zero_mid = nn.Conv2d(c2, c2, 1)
        for conv in (self.zero0, self.zero1, self.zero2, self.zero_mid):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def forward(self, z, temb, ctx, depth):
        if depth.ndim != 4 or depth.shape[1] != 1:
            raise ValidationError(f"control depth must be (B, 1, H, W), got {tuple(depth.shape)}")
        if depth.shape[-2:] != (self.cfg.image_size, self.cfg.image_size):
            raise ValidationError(
                f"control depth spatial dims {tuple(depth.shape[-2:])} must equal "
                f"image size {self.cfg.image_size}"
            )
        hint = self.hint_encoder(depth)
        h = self.conv_in(z) + hint
        h = self.attn0(self.down0(h, temb), ctx)
        r0 = self.zero0(h)
        h = self.pool0(h)
        h = self.attn1(self.down1(h, temb), ctx)
        r1 = self.zero1(h)
        h = self.pool1(h)
        h = self.attn2(self.down2(h, temb), ctx)
        r2 = self.zero2(h)
        h = self.mid(h, temb)
        return {"down0": r0, "down1": r1, "down2": r2, "mid": self.zero_mid(h)}


class ConditionalDenoiser(nn.Module):
    """Base UNet + control branch + fusion injection sites, wired together."""

    def __init__(self, cfg, seed=0):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(int(rng.stream(seed, "init", "denoiser").integers(2**62)))
            self.unet = DenoiseUNet(cfg)
            self.control = ControlBranch(cfg)
            lat = cfg.latent_size
            c0, _, c2 = self.unet.chans
            self.injector = FusionInjector(
                cfg.cond_width,
                {
                    "down": (c0, (lat, lat)),
                    "mid": (c2, (lat // 4, lat // 4)),
                    "up": (c0, (lat, lat)),
                },
            )
        self.to(cfg.torch_dtype)

    def denoise(self, z, t, ctx, depth=None, fusion_sets=None, use_control=True):
        """eps prediction for a batch; depth and fusion are optional conditioning."""
        control = None
        if depth is not None and use_control:
            temb = self.unet.time_embedding(t)
            control = self.control(z, temb, ctx, depth)
        fusion_apply = None
        if fusion_sets is not None:
            mode = "full" if self.cfg.ablation == "without_ppzp" else "ppzp"

            def fusion_apply(scale, h):
                return self.injector.apply(scale, h, fusion_sets, mode=mode)

        return self.unet(z, t, ctx, control=control, fusion_apply=fusion_apply)
