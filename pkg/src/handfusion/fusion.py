"""Position-preserving zero padding (PPZP) and additive injection.

A fusion feature map is resized into the scaled bounding-box region of a
zero map the size of a UNet feature layer, then projected by a per-site
zero-initialized 1x1 convolution and added. Cells outside the region are
never touched: injection writes only inside the region slice, so the
outside equality holds bit-for-bit for every parameter state (the
projection carries no bias for the same reason).
"""

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .errors import ValidationError
from .layers import bilinear_resize
from .mesh import NormalizedBBox

SCALES = ("down", "mid", "up")


@dataclass
class FusionFeatureSet:
    """Per-scale conditioning maps (c, h, w) plus the bbox that localizes them."""

    down: torch.Tensor
    mid: torch.Tensor
    up: torch.Tensor
    bbox: NormalizedBBox

    def __post_init__(self):
        for name in SCALES:
            t = getattr(self, name)
            if t.ndim != 3:
                raise ValidationError(f"{name} map must be (c, h, w), got {tuple(t.shape)}")
            if t.shape[-1] != t.shape[-2]:
                raise ValidationError(f"{name} map must be square, got {tuple(t.shape)}")
            if not torch.isfinite(t).all():
                raise ValidationError(f"{name} map contains non-finite values")

    def scale_map(self, scale):
        if scale not in SCALES:
            raise ValidationError(f"unknown scale {scale!r}")
        return getattr(self, scale)


@dataclass
class PaddedFeature:
    """PPZP output: a (c, H, W) map that is exactly zero outside ``rows`` x ``cols``."""

    data: torch.Tensor
    rows: tuple
    cols: tuple


def bbox_region(bbox, height, width):
    """Scaled integer region of a normalized bbox: floor starts, ceil ends, min 1 cell."""
    r0 = math.floor(bbox.y0 * height)
    r1 = max(r0 + 1, math.ceil(bbox.y1 * height))
    c0 = math.floor(bbox.x0 * width)
    c1 = max(c0 + 1, math.ceil(bbox.x1 * width))
    if r0 >= height or c0 >= width or r1 > height or c1 > width:
        raise ValidationError(
            f"bbox {bbox.as_tuple()} maps outside a {height}x{width} grid"
        )
    return r0, r1, c0, c1


def ppzp_pad(feature, bbox, target):
    """Zero-pad ``feature`` into the bbox region of a ``target`` = (H, W) grid.

    The feature is bilinearly resized to the region extent and written
    there; every cell outside the region is exactly 0.0.
    """
    if feature.ndim != 3:
        raise ValidationError(f"feature must be (c, h, w), got {tuple(feature.shape)}")
    height, width = target
    if height < 1 or width < 1:
        raise ValidationError(f"target grid must be at least 1x1, got {target}")
    r0, r1, c0, c1 = bbox_region(bbox, height, width)
    region = bilinear_resize(feature, r1 - r0, c1 - c0)
    out = feature.new_zeros((feature.shape[0], height, width))
    out[:, r0:r1, c0:c1] = region
    return PaddedFeature(data=out, rows=(r0, r1), cols=(c0, c1))


def full_pad(feature, target):
    """No-masking variant (the without-PPZP ablation): resize over the whole grid."""
    if feature.ndim != 3:
        raise ValidationError(f"feature must be (c, h, w), got {tuple(feature.shape)}")
    height, width = target
    return PaddedFeature(
        data=bilinear_resize(feature, height, width), rows=(0, height), cols=(0, width)
    )


class InjectionSite(nn.Module):
    """One per-scale binding between fusion maps and a UNet feature layer.

    The channel projection is a bias-free 1x1 convolution initialized to
    zero, so a fresh site is an exact no-op and a zero input vector always
    projects to zero.
    """

    def __init__(self, scale_id, in_channels, target_channels=None, target_hw=None):
        super().__init__()
        if scale_id not in SCALES:
            raise ValidationError(f"scale_id must be one of {SCALES}, got {scale_id!r}")
        self.scale_id = scale_id
        self.in_channels = in_channels
        self.target_channels = target_channels
        self.target_hw = tuple(target_hw) if target_hw is not None else None
        if target_channels is not None:
            self.proj = nn.Conv2d(in_channels, target_channels, 1, bias=False)
            nn.init.zeros_(self.proj.weight)
        else:
            self.proj = None

    @property
    def bound(self):
        return self.proj is not None and self.target_hw is not None

    def _require_bound(self):
        if not self.bound:
            raise ValidationError(f"injection site {self.scale_id!r} is not bound to a UNet layer")

    def inject(self, unet_feature, padded):
        """fused = unet_feature + projection(padded), touching only the region slice."""
        self._require_bound()
        if unet_feature.shape[-3:] != (self.target_channels, *self.target_hw):
            raise ValidationError(
                f"scale {self.scale_id!r}: UNet feature {tuple(unet_feature.shape)} does not "
                f"match bound target ({self.target_channels}, {self.target_hw[0]}, {self.target_hw[1]})"
            )
        if padded.data.shape[-3:] != (self.in_channels, *self.target_hw):
            raise ValidationError(
                f"scale {self.scale_id!r}: padded map {tuple(padded.data.shape)} does not match "
                f"expected ({self.in_channels}, {self.target_hw[0]}, {self.target_hw[1]})"
            )
        r0, r1 = padded.rows
        c0, c1 = padded.cols
        region = padded.data[..., r0:r1, c0:c1]
        delta = self.proj(region.unsqueeze(0) if region.ndim == 3 else region)
        if region.ndim == 3:
            delta = delta.squeeze(0)
        fused = unet_feature.clone()
        fused[..., r0:r1, c0:c1] = unet_feature[..., r0:r1, c0:c1] + delta
        return fused


def fuse_all(unet_features, fusion, sites, mode="ppzp"):
    """Apply PPZP + injection at every scale, in (down, mid, up) order."""
    if mode not in ("ppzp", "full"):
        raise ValidationError(f"mode must be 'ppzp' or 'full', got {mode!r}")
    for scale in SCALES:
        if scale not in unet_features:
            raise ValidationError(f"missing UNet feature for scale {scale!r}")
        if scale not in sites:
            raise ValidationError(f"missing injection site for scale {scale!r}")
    fused = {}
    for scale in SCALES:
        site = sites[scale]
        site._require_bound()
        fmap = fusion.scale_map(scale)
        if mode == "ppzp":
            padded = ppzp_pad(fmap, fusion.bbox, site.target_hw)
        else:
            padded = full_pad(fmap, site.target_hw)
        fused[scale] = site.inject(unet_features[scale], padded)
    return fused


class FusionInjector(nn.Module):
    """Owns the three injection sites and applies them inside a UNet forward."""

    def __init__(self, in_channels, bindings):
        super().__init__()
        self.sites = nn.ModuleDict(
            {
                scale: InjectionSite(scale, in_channels, channels, hw)
                for scale, (channels, hw) in bindings.items()
            }
        )

    def site(self, scale):
        if scale not in self.sites:
            raise ValidationError(f"no injection site bound for scale {scale!r}")
        return self.sites[scale]

    def apply(self, scale, unet_feature, fusion_sets, mode="ppzp"):
        """Inject per-sample fusion maps into a batched (B, C, H, W) feature."""
        site = self.site(scale)
        if len(fusion_sets) != unet_feature.shape[0]:
            raise ValidationError(
                f"scale {scale!r}: got {len(fusion_sets)} fusion sets for batch "
                f"of {unet_feature.shape[0]}"
            )
        rows = []
        for b, fset in enumerate(fusion_sets):
            fmap = fset.scale_map(scale)
            if mode == "ppzp":
                padded = ppzp_pad(fmap, fset.bbox, site.target_hw)
            else:
                padded = full_pad(fmap, site.target_hw)
            rows.append(site.inject(unet_feature[b], padded))
        return torch.stack(rows)
