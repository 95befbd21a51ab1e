"""Efficient (linear-complexity) attention with cross-batch key/value pooling."""

from __future__ import annotations

import torch
import torch.nn as nn

from ..errors import ContractError, ShapeError
from .layers import group_norm


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, e = x.shape
    return x.reshape(b, n, heads, e // heads).transpose(1, 2)


def attention_context(k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax_tokens(k)^T v for (..., n, d) inputs -> (..., d, d).

    Cost is linear in the token count n.
    """
    return torch.softmax(k.transpose(-1, -2).contiguous(), dim=-1) @ v


def efficient_cross_batch_attention(q, k, v, heads: int, group_size: int = 1) -> torch.Tensor:
    """Per-patch queries against keys/values pooled over each group of patches.

    q, k, v have shape (B, n, E) with B a multiple of ``group_size``;
    consecutive runs of ``group_size`` rows form one group. Queries are
    softmax-normalized over features, keys over the pooled token axis.
    Returns (B, n, E) with heads concatenated (no output projection).
    """
    if q.shape != k.shape or k.shape != v.shape:
        raise ShapeError(f"q/k/v shapes differ: {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}")
    b, n, e = q.shape
    if e % heads:
        raise ShapeError(f"{heads} heads do not divide embedding {e}")
    if group_size < 1 or b % group_size:
        raise ContractError(f"batch of {b} patches is not a whole number of groups of {group_size}")
    g = group_size
    qh = torch.softmax(_split_heads(q, heads), dim=-1)  # (B, h, n, d)
    kp = k.reshape(b // g, g * n, e)
    vp = v.reshape(b // g, g * n, e)
    ctx = attention_context(_split_heads(kp, heads), _split_heads(vp, heads))  # (B/g, h, d, d)
    ctx = ctx.repeat_interleave(g, dim=0)
    out = qh @ ctx  # (B, h, n, d)
    return out.transpose(1, 2).reshape(b, n, e)


class TransformerBlock(nn.Module):
    """Tokenize -> cross-batch efficient attention -> de-tokenize, with residual adds.

    Tokens are produced by a depth-wise conv with kernel = stride = token
    size, so the token grid keeps the 3D layout. Query, key and value come
    from depth-wise 3x3x3 convs over that grid. With ``group_size > 1`` a
    learned embedding per group slot tags which member each token came from.
    """

    def __init__(self, channels: int, embed_dim: int, heads: int, token_size: int, group_size: int = 1, norm_groups: int = 4):
        super().__init__()
        self.channels, self.embed_dim, self.heads = channels, embed_dim, heads
        self.token_size, self.group_size = token_size, group_size
        self.norm = group_norm(channels, norm_groups)
        self.tokenize = nn.Conv3d(channels, channels, token_size, stride=token_size, groups=channels)
        self.embed = nn.Linear(channels, embed_dim)
        self.member_embedding = nn.Parameter(torch.zeros(group_size, embed_dim)) if group_size > 1 else None
        self.to_q = nn.Conv3d(embed_dim, embed_dim, 3, padding=1, groups=embed_dim)
        self.to_k = nn.Conv3d(embed_dim, embed_dim, 3, padding=1, groups=embed_dim)
        self.to_v = nn.Conv3d(embed_dim, embed_dim, 3, padding=1, groups=embed_dim)
        self.out = nn.Linear(embed_dim, embed_dim)
        self.unembed = nn.Linear(embed_dim, channels)
        self.detokenize = nn.ConvTranspose3d(channels, channels, token_size, stride=token_size, groups=channels)

    def tokens(self, x: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int, int]]:
        """(B, C, D, H, W) -> (B, N, E) tokens in row-major token-grid order."""
        ts = self.token_size
        if any(s % ts for s in x.shape[2:]):
            raise ShapeError(f"spatial dims {tuple(x.shape[2:])} not divisible by token size {ts}")
        h = self.tokenize(x)
        grid = tuple(h.shape[2:])
        h = h.flatten(2).transpose(1, 2)
        return self.embed(h), grid

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        tok, grid = self.tokens(self.norm(x))
        if self.member_embedding is not None:
            if b % self.group_size:
                raise ContractError(f"batch of {b} patches is not a whole number of groups of {self.group_size}")
            tok = tok + self.member_embedding.repeat(b // self.group_size, 1)[:, None, :]
        g = tok.transpose(1, 2).reshape(b, self.embed_dim, *grid)
        q, k, v = (conv(g).flatten(2).transpose(1, 2) for conv in (self.to_q, self.to_k, self.to_v))
        att = efficient_cross_batch_attention(q, k, v, self.heads, self.group_size)
        tok = tok + self.out(att)
        h = self.unembed(tok).transpose(1, 2).reshape(b, self.channels, *grid)
        return x + self.detokenize(h)
