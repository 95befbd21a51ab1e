"""The conditional 3D denoiser predicting the clean target patch."""

from __future__ import annotations

import torch
import torch.nn as nn

from ..config import DenoiserConfig
from ..errors import ShapeError
from .attention import TransformerBlock
from .layers import ResidualBlock, TimeEmbedding, channel_shuffle_down, channel_shuffle_up


class DeepFeatureExtraction(nn.Module):
    """A stack of residual blocks at the bottleneck; depth 0 is the identity."""

    def __init__(self, channels: int, depth: int, embed_dim: int, norm_groups: int, skip_scale: float):
        super().__init__()
        self.blocks = nn.ModuleList(
            ResidualBlock(channels, channels, embed_dim, norm_groups, skip_scale) for _ in range(depth)
        )

    def forward(self, x, temb):
        for block in self.blocks:
            x = block(x, temb)
        return x


class Denoiser(nn.Module):
    """Encoder (transformer + residual blocks, channel-shuffle down), bottleneck
    deep feature extraction, decoder (channel-shuffle up + residual blocks).

    Inputs are the noisy patch and the low-field condition, each
    (B, 1, P, P, P) with P = patch_size + 2*halo when cross-batch is on. The
    first-resolution residual convolutions run unpadded and consume the halo
    (one voxel per conv); any halo left after them is cropped before the
    first downsampling. Deeper convolutions zero-pad. B must be a whole
    number of patch groups; rows ``[g*k, g*(k+1))`` form one group.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        f, e, ng, sk = cfg.filters, cfg.embed_dim, cfg.norm_groups, cfg.skip_scale
        r3 = cfg.shuffle_factor**3
        self.time_mlp = TimeEmbedding(e, cfg.time_scale)
        self.stem = nn.Conv3d(cfg.in_channels, f[0], 3, padding=1)
        self.transformers = nn.ModuleList(
            TransformerBlock(f[i], e, cfg.heads, cfg.token_sizes[i], cfg.effective_group, ng) for i in range(cfg.n_stages)
        )
        # the first-resolution convs eat the halo instead of zero-padding
        budget = cfg.effective_halo
        consume = []
        for _ in range(2):
            consume.append(min(budget, 2))
            budget -= consume[-1]
        self.halo_leftover = budget
        self.encoders = nn.ModuleList(
            nn.ModuleList(
                [
                    ResidualBlock(f[i], f[i], e, ng, sk, consume=consume[j] if i == 0 else 0)
                    for j in range(2)
                ]
            )
            for i in range(cfg.n_stages)
        )
        self.down = nn.ModuleList(nn.Conv3d(f[i] * r3, f[i + 1], 1) for i in range(cfg.n_stages - 1))
        self.dfe = DeepFeatureExtraction(f[-1], cfg.dfe_depth, e, ng, sk)
        self.up = nn.ModuleList(nn.Conv3d(f[i + 1], f[i] * r3, 1) for i in range(cfg.n_stages - 1))
        self.decoders = nn.ModuleList(
            nn.ModuleList([ResidualBlock(2 * f[i], f[i], e, ng, sk), ResidualBlock(f[i], f[i], e, ng, sk)])
            for i in range(cfg.n_stages - 1)
        )
        self.head = nn.Conv3d(f[0], 1, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def _time(self, t, batch: int, ref: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=ref.dtype, device=ref.device)
        if t.ndim == 0:
            t = t.expand(batch)
        if t.shape != (batch,):
            raise ShapeError(f"time must be a scalar or have shape ({batch},), got {tuple(t.shape)}")
        return self.time_mlp(t)

    def forward(self, x_t: torch.Tensor, x_c: torch.Tensor, t) -> torch.Tensor:
        cfg = self.cfg
        n_in = cfg.input_extent
        if x_t.shape != x_c.shape:
            raise ShapeError(f"input: noisy {tuple(x_t.shape)} and condition {tuple(x_c.shape)} differ")
        if x_t.ndim != 5 or x_t.shape[1] != 1 or tuple(x_t.shape[2:]) != (n_in,) * 3:
            raise ShapeError(f"input: expected (B, 1, {n_in}, {n_in}, {n_in}), got {tuple(x_t.shape)}")
        b = x_t.shape[0]
        if b % cfg.effective_group:
            raise ShapeError(f"input: batch {b} is not a multiple of group size {cfg.effective_group}")
        temb = self._time(t, b, x_t)
        r, w = cfg.shuffle_factor, self.halo_leftover

        h = self.stem(torch.cat([x_t, x_c], dim=1))
        skips = []
        for i in range(cfg.n_stages):
            h = self.transformers[i](h)
            for block in self.encoders[i]:
                h = block(h, temb)
            if i == 0 and w:
                h = h[:, :, w:-w, w:-w, w:-w]
            if i < cfg.n_stages - 1:
                skips.append(h)
                h = self.down[i](channel_shuffle_down(h, r))
        h = self.dfe(h, temb)
        for i in reversed(range(cfg.n_stages - 1)):
            h = channel_shuffle_up(self.up[i](h), r)
            if h.shape != skips[i].shape:
                raise ShapeError(f"decoder stage {i}: {tuple(h.shape)} vs skip {tuple(skips[i].shape)}")
            h = torch.cat([h, skips[i] * cfg.skip_scale], dim=1)
            for block in self.decoders[i]:
                h = block(h, temb)
        return self.head(h)


def build_denoiser(cfg: DenoiserConfig, seed: int = 0, dtype=torch.float32) -> Denoiser:
    """Deterministically initialized network; the global torch RNG is left untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Denoiser(cfg)
    return model.to(dtype)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def parameter_class(name: str) -> str:
    """Coarse class of a parameter, used by the gradient checker."""
    if name.startswith("time_mlp") or ".film." in name:
        return "mlp"
    if "norm" in name:
        return "norm"
    if name.startswith("transformers"):
        return "attention"
    return "conv"
