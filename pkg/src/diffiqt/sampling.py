"""Ancestral sampling of an enhanced volume conditioned on a low-field volume."""

from __future__ import annotations

import time
from typing import Callable, Optional, Protocol

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, model_from_checkpoint
from .config import DenoiserConfig, SamplerConfig
from .denoiser import Denoiser
from .errors import ConfigError, RunAbort
from .patching import PatchGrid, crop_to_source, cut_halos, halo_source, make_grid, make_groups, pad_to_grid
from .schedule import NoiseSchedule, Prediction, alpha_sigma, convert, posterior_params, uniform_grid
from .volume import Volume, denormalize, load_volume, model_frame, save_volume

INIT_STEP = -1


class Predictor(Protocol):
    def __call__(self, x_t: np.ndarray, x_c: np.ndarray, t: float, coords: list) -> np.ndarray:
        """Halo-padded (B, P, P, P) inputs -> (B, p, p, p) estimate of the clean target."""


class ModelPredictor:
    """Adapts a trained :class:`Denoiser` (any parametrization) to a clean-target predictor."""

    def __init__(self, model: Denoiser, sched: NoiseSchedule, parametrization: str = "x"):
        self.model = model.eval()
        self.sched = sched
        self.kind = parametrization
        self.dtype = next(model.parameters()).dtype

    def __call__(self, x_t, x_c, t, coords):
        h = self.model.cfg.effective_halo
        xt = torch.from_numpy(np.ascontiguousarray(x_t)).to(self.dtype)[:, None]
        xc = torch.from_numpy(np.ascontiguousarray(x_c)).to(self.dtype)[:, None]
        with torch.no_grad():
            out = self.model(xt, xc, t)
            if self.kind != "x":
                inner = xt if h == 0 else xt[..., h:-h, h:-h, h:-h]
                out = convert(Prediction(self.kind, out), "x", inner, t, self.sched).tensor
        return out[:, 0].double().numpy()


def _stream(seed: int, group: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, group, step + 1]))


def _write(target: np.ndarray, grid: PatchGrid, coord, data: np.ndarray) -> None:
    p = grid.patch_size
    o = grid.origin(coord)
    target[o[0] : o[0] + p, o[1] : o[1] + p, o[2] : o[2] + p] = data


def _read(source: np.ndarray, grid: PatchGrid, coord) -> np.ndarray:
    p = grid.patch_size
    o = grid.origin(coord)
    return source[o[0] : o[0] + p, o[1] : o[1] + p, o[2] : o[2] + p]


def sample_volume(
    lf: Volume,
    predictor: Predictor,
    cfg: DenoiserConfig,
    scfg: SamplerConfig = SamplerConfig(),
    sched: NoiseSchedule = NoiseSchedule(),
    callback: Optional[Callable[[int, float, np.ndarray], None]] = None,
    denormalize_output: bool = True,
) -> Volume:
    """Run T reverse steps over every patch group of ``lf`` in lockstep.

    The whole-volume state x_t is kept so that halos always carry the
    neighbors' current values. Noise for step i of group g comes from its
    own stream derived from (seed, g, i), so results do not depend on how
    groups are batched. The output is the clean-target prediction of the
    last step; if ``lf`` carries a normalization affine the result is mapped
    back through it.
    """
    p, h = cfg.patch_size, cfg.effective_halo
    grid = make_grid(lf.dims, p)
    groups = make_groups(grid)
    cond_ext = halo_source(pad_to_grid(lf.data.astype(np.float64), grid), h)
    x = np.zeros(grid.padded_dims, dtype=np.float64)
    for gi, group in enumerate(groups):
        rng = _stream(scfg.seed, gi, INIT_STEP)
        for coord, dup in zip(group.coords, group.duplicate):
            if not dup:
                _write(x, grid, coord, rng.standard_normal((p, p, p)))
    x_hat = np.zeros_like(x)
    for step, (s, t) in zip(range(scfg.T, 0, -1), uniform_grid(scfg.T)):
        x_ext = halo_source(x, h)
        for start in range(0, len(groups), scfg.groups_per_batch):
            chunk = groups[start : start + scfg.groups_per_batch]
            coords = [c for g in chunk for c in g.coords]
            pred = predictor(cut_halos(x_ext, grid, coords, h), cut_halos(cond_ext, grid, coords, h), t, coords)
            if scfg.clip_x:
                pred = np.clip(pred, -1.0, 1.0)
            flags = [d for g in chunk for d in g.duplicate]
            for coord, dup, patch in zip(coords, flags, pred):
                if not dup:
                    _write(x_hat, grid, coord, patch)
        if not np.all(np.isfinite(x_hat)):
            raise RunAbort("non-finite prediction during sampling", step=step, t=t)
        if callback is not None:
            callback(step, t, x_hat)
        if s > 0.0:
            post = posterior_params(sched, s, t)
            std = np.sqrt(post.sigma2_Q)
            x = post.mean(x, x_hat)
            for gi, group in enumerate(groups):
                rng = _stream(scfg.seed, gi, step)
                for coord, dup in zip(group.coords, group.duplicate):
                    if not dup:
                        _read(x, grid, coord)[...] += std * rng.standard_normal((p, p, p))
    out = Volume(crop_to_source(x_hat, grid).astype(np.float32), spacing=lf.spacing, meta=dict(lf.meta))
    if denormalize_output and "affine" in lf.meta:
        out = denormalize(out)
    return out


def sample_with_checkpoint(lf: Volume, ckpt: Checkpoint, scfg: SamplerConfig = SamplerConfig(),
                           sched: NoiseSchedule = NoiseSchedule(), **kw) -> Volume:
    model = model_from_checkpoint(ckpt)
    kind = ckpt.train.parametrization if ckpt.train is not None else "x"
    return sample_volume(lf, ModelPredictor(model, sched, kind), ckpt.denoiser, scfg, sched, **kw)


def enhance(lf_path, checkpoint_path, out_path, scfg: SamplerConfig = SamplerConfig(),
            sched: NoiseSchedule = NoiseSchedule(), expect: Optional[DenoiserConfig] = None) -> dict:
    """Load -> model frame -> sample -> denormalize -> save; returns timing and provenance."""
    start = time.perf_counter()
    lf = load_volume(lf_path)
    ckpt = load_checkpoint(checkpoint_path, expect=expect)
    out = sample_with_checkpoint(model_frame(lf), ckpt, scfg, sched)
    if out.dims != lf.dims:
        raise ConfigError(f"enhanced volume {out.dims} does not match input {lf.dims}")
    save_volume(out, out_path)
    return {
        "input": str(lf_path),
        "checkpoint": str(checkpoint_path),
        "output": str(out_path),
        "dims": list(out.dims),
        "seconds": round(time.perf_counter() - start, 3),
        "sampler": scfg.model_dump(mode="json"),
        "checkpoint_step": ckpt.step,
    }


def alpha_sigma_at(sched: NoiseSchedule, T: int) -> list[tuple[float, float]]:
    """Signal/noise scales visited by a T-step sampler (diagnostic)."""
    return [alpha_sigma(sched, t) for _, t in uniform_grid(T)]
