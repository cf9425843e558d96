"""Small text-conditioned UNet noise predictor."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    return emb.to(torch.get_default_dtype() if not torch.is_floating_point(t) else t.dtype)


def _groups(ch: int) -> int:
    return 8 if ch % 8 == 0 and ch >= 16 else 4 if ch % 4 == 0 else 1


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Image features attend over the C conditioning tokens."""

    def __init__(self, ch: int, ctx_dim: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.q = nn.Linear(ch, ch, bias=False)
        self.k = nn.Linear(ctx_dim, ch, bias=False)
        self.v = nn.Linear(ctx_dim, ch, bias=False)
        self.out = nn.Linear(ch, ch)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q = self.q(self.norm(x).flatten(2).transpose(1, 2))
        k, v = self.k(ctx), self.v(ctx)

        def split(z: torch.Tensor) -> torch.Tensor:
            return z.reshape(b, z.shape[1], self.heads, c // self.heads).transpose(1, 2)

        attn = torch.softmax(split(q) @ split(k).transpose(-1, -2) / math.sqrt(c // self.heads), dim=-1)
        o = (attn @ split(v)).transpose(1, 2).reshape(b, h * w, c)
        return x + self.out(o).transpose(1, 2).reshape(b, c, h, w)


class Denoiser(nn.Module):
    """Three-level UNet (32 -> 16 -> 8) with cross-attention at the 8x8 bottleneck.

    ``ctx`` is a (B, C, N) token matrix; a learned per-slot position table is
    added before attention so token order matters.
    """

    def __init__(self, width: int = 32, in_ch: int = 3, n_tokens: int = 10, token_dim: int = 32, heads: int = 4):
        super().__init__()
        w = width
        tdim = 4 * w
        self.width = w
        self.time_mlp = nn.Sequential(nn.Linear(w, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.token_pos = nn.Parameter(torch.zeros(n_tokens, token_dim))
        self.inp = nn.Conv2d(in_ch, w, 3, padding=1)
        self.down1 = ResBlock(w, w, tdim)
        self.pool1 = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.down2 = ResBlock(w, 2 * w, tdim)
        self.pool2 = nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1)
        self.mid1 = ResBlock(2 * w, 4 * w, tdim)
        self.attn1 = CrossAttention(4 * w, token_dim, heads)
        self.mid2 = ResBlock(4 * w, 4 * w, tdim)
        self.attn2 = CrossAttention(4 * w, token_dim, heads)
        self.up2 = nn.Conv2d(4 * w, 2 * w, 3, padding=1)
        self.dec2 = ResBlock(4 * w, 2 * w, tdim)
        self.up1 = nn.Conv2d(2 * w, w, 3, padding=1)
        self.dec1 = ResBlock(2 * w, w, tdim)
        self.out_norm = nn.GroupNorm(_groups(w), w)
        self.out = nn.Conv2d(w, in_ch, 3, padding=1)
        nn.init.normal_(self.token_pos, std=0.02)

    def forward(self, x: torch.Tensor, t: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(timestep_embedding(t.to(x.dtype), self.width))
        ctx = ctx + self.token_pos.to(ctx.dtype)
        h0 = self.inp(x)
        h1 = self.down1(h0, temb)
        h2 = self.down2(self.pool1(h1), temb)
        m = self.mid1(self.pool2(h2), temb)
        m = self.attn1(m, ctx)
        m = self.mid2(m, temb)
        m = self.attn2(m, ctx)
        u2 = self.up2(F.interpolate(m, scale_factor=2, mode="nearest"))
        u2 = self.dec2(torch.cat([u2, h2], dim=1), temb)
        u1 = self.up1(F.interpolate(u2, scale_factor=2, mode="nearest"))
        u1 = self.dec1(torch.cat([u1, h1], dim=1), temb)
        return self.out(F.silu(self.out_norm(u1)))
