"""Attention layers, embeddings and resize kernels shared by the model stack."""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError


def sinusoidal_embedding(steps, dim, max_period=10_000.0):
    """Standard sin/cos embedding of integer step indices; (B,) -> (B, dim)."""
    steps = torch.as_tensor(steps)
    if steps.ndim == 0:
        steps = steps[None]
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    )
    args = steps[:, None].to(torch.float64) * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _axis_lerp_indices(in_size, out_size):
    """Half-pixel-center source indices and fractional weights for one axis."""
    pos = (torch.arange(out_size, dtype=torch.float64) + 0.5) * (in_size / out_size) - 0.5
    lo = torch.floor(pos)
    frac = pos - lo
    i0 = lo.clamp(0, in_size - 1).long()
    i1 = (lo + 1).clamp(0, in_size - 1).long()
    return i0, i1, frac


def bilinear_resize(x, out_h, out_w):
    """Bilinear resize with half-pixel centers; (..., H, W) -> (..., out_h, out_w).

    Written in lerp form (a + t*(b-a)) so a constant input resizes to the
    bit-identical constant, and the map stays exactly linear in the input.
    """
    in_h, in_w = x.shape[-2], x.shape[-1]
    r0, r1, fy = _axis_lerp_indices(in_h, out_h)
    c0, c1, fx = _axis_lerp_indices(in_w, out_w)
    fy = fy.to(x.dtype)
    fx = fx.to(x.dtype)
    top = x.index_select(-2, r0)
    bot = x.index_select(-2, r1)
    rows = top + fy.view(-1, 1) * (bot - top)
    left = rows.index_select(-1, c0)
    right = rows.index_select(-1, c1)
    return left + fx * (right - left)


def resample_tokens(x, out_len):
    """Linear interpolation along the token axis; (..., L, d) -> (..., out_len, d)."""
    in_len = x.shape[-2]
    if in_len == out_len:
        return x
    i0, i1, frac = _axis_lerp_indices(in_len, out_len)
    frac = frac.to(x.dtype)
    a = x.index_select(-2, i0)
    b = x.index_select(-2, i1)
    return a + frac.view(-1, 1) * (b - a)


class MultiheadAttention(nn.Module):
    """Plain softmax attention; queries of width ``dim``, keys/values of ``kv_dim``."""

    def __init__(self, dim, heads, kv_dim=None):
        super().__init__()
        if dim % heads:
            raise ValidationError(f"width {dim} not divisible by {heads} heads")
        kv_dim = dim if kv_dim is None else kv_dim
        self.heads = heads
        self.head_dim = dim // heads
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(kv_dim, dim)
        self.to_v = nn.Linear(kv_dim, dim)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, q_tokens, kv_tokens):
        b, lq, _ = q_tokens.shape
        lk = kv_tokens.shape[1]
        q = self.to_q(q_tokens).view(b, lq, self.heads, self.head_dim).transpose(1, 2)
        k = self.to_k(kv_tokens).view(b, lk, self.heads, self.head_dim).transpose(1, 2)
        v = self.to_v(kv_tokens).view(b, lk, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, lq, -1)
        return self.to_out(out)


class SelfAttentionLayer(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, heads)

    def forward(self, tokens):
        h = self.norm(tokens)
        return tokens + self.attn(h, h)


class CrossAttentionLayer(nn.Module):
    """Pre-norm cross attention; query and key/value widths must agree."""

    def __init__(self, dim, heads, kv_dim=None):
        super().__init__()
        kv_dim = dim if kv_dim is None else kv_dim
        if kv_dim != dim:
            raise ValidationError(
                f"cross-attention expects one shared token width, got query {dim} vs key/value {kv_dim}"
            )
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, heads)

    def forward(self, q_tokens, kv_tokens):
        return q_tokens + self.attn(self.norm_q(q_tokens), self.norm_kv(kv_tokens))
