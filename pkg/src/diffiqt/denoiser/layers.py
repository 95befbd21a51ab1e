"""Building blocks: 3D channel shuffle, time embedding, residual block."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ShapeError


def channel_shuffle_down(x: torch.Tensor, r: int) -> torch.Tensor:
    """(.., C, D, H, W) -> (.., C*r^3, D/r, H/r, W/r).

    out[c*r^3 + (dz*r + dy)*r + dx, i, j, k] = x[c, i*r + dz, j*r + dy, k*r + dx]
    """
    if r == 1:
        return x
    *lead, c, d, h, w = x.shape
    if d % r or h % r or w % r:
        raise ShapeError(f"spatial dims {(d, h, w)} not divisible by shuffle factor {r}")
    y = x.reshape(-1, c, d // r, r, h // r, r, w // r, r)
    y = y.permute(0, 1, 3, 5, 7, 2, 4, 6)
    return y.reshape(*lead, c * r**3, d // r, h // r, w // r)


def channel_shuffle_up(x: torch.Tensor, r: int) -> torch.Tensor:
    """Inverse of :func:`channel_shuffle_down`."""
    if r == 1:
        return x
    *lead, c, d, h, w = x.shape
    if c % r**3:
        raise ShapeError(f"{c} channels not divisible by {r}^3")
    co = c // r**3
    y = x.reshape(-1, co, r, r, r, d, h, w)
    y = y.permute(0, 1, 5, 2, 6, 3, 7, 4)
    return y.reshape(*lead, co, d * r, h * r, w * r)


def sinusoidal_embedding(t: torch.Tensor, dim: int, scale: float = 1000.0) -> torch.Tensor:
    """Interleaved (sin, cos) features of ``scale * t``; t=0 gives 0, 1, 0, 1, ..."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / max(half, 1))
    arg = scale * t[:, None] * freqs[None, :]
    emb = torch.stack([torch.sin(arg), torch.cos(arg)], dim=-1).reshape(t.shape[0], 2 * half)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int, scale: float = 1000.0):
        super().__init__()
        self.dim = dim
        self.scale = scale
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        h = sinusoidal_embedding(t, self.dim, self.scale)
        return self.fc2(F.mish(self.fc1(h)))


def group_norm(channels: int, groups: int) -> nn.GroupNorm:
    g = math.gcd(groups, channels)
    return nn.GroupNorm(g, channels)


class ResidualBlock(nn.Module):
    """y = (F(x, temb) + proj(x)) * skip_scale.

    F = norm -> Mish -> conv3 -> FiLM(temb) -> norm -> Mish -> conv3. The
    FiLM projection and the last conv start at zero, so a fresh block
    returns proj(x) * skip_scale.

    ``consume`` (0, 1 or 2) makes that many of the convs unpadded: they eat
    one voxel of halo per side instead of zero-padding, and the skip path is
    cropped to match.
    """

    def __init__(
        self,
        c_in: int,
        c_out: int,
        embed_dim: int,
        norm_groups: int = 4,
        skip_scale: float = 2**-0.5,
        consume: int = 0,
    ):
        super().__init__()
        if consume not in (0, 1, 2):
            raise ValueError("consume must be 0, 1 or 2")
        self.c_in, self.c_out = c_in, c_out
        self.skip_scale = skip_scale
        self.consume = consume
        self.norm1 = group_norm(c_in, norm_groups)
        self.conv1 = nn.Conv3d(c_in, c_out, 3, padding=0 if consume >= 1 else 1)
        self.film = nn.Linear(embed_dim, 2 * c_out)
        self.norm2 = group_norm(c_out, norm_groups)
        self.conv2 = nn.Conv3d(c_out, c_out, 3, padding=0 if consume >= 2 else 1)
        self.proj = nn.Conv3d(c_in, c_out, 1) if c_in != c_out else nn.Identity()
        nn.init.zeros_(self.film.weight)
        nn.init.zeros_(self.film.bias)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        if x.ndim != 5 or x.shape[1] != self.c_in:
            raise ShapeError(f"residual block expects {self.c_in} channels, got shape {tuple(x.shape)}")
        h = self.conv1(F.mish(self.norm1(x)))
        scale, shift = self.film(temb).chunk(2, dim=-1)
        h = h * (1.0 + scale[:, :, None, None, None]) + shift[:, :, None, None, None]
        h = self.conv2(F.mish(self.norm2(h)))
        skip = self.proj(x)
        if self.consume:
            c = self.consume
            skip = skip[:, :, c:-c, c:-c, c:-c]
        return (h + skip) * self.skip_scale
