"""Loss, Adam training loop over cross-batch patch groups, and gradient checking."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, load_params, params_from_model
from .config import DenoiserConfig, TrainConfig
from .denoiser import Denoiser, build_denoiser, parameter_class
from .errors import ConfigError, RunAbort, ShapeError
from .schedule import NoiseSchedule, Prediction, alpha_sigma, convert
from .volume import Volume, apply_affine, model_frame

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def loss(x, x_hat) -> torch.Tensor:
    """Mean squared error over every voxel of the group."""
    if tuple(x.shape) != tuple(x_hat.shape):
        raise ShapeError(f"target {tuple(x.shape)} and prediction {tuple(x_hat.shape)} differ")
    return F.mse_loss(x_hat, x)


# -- data ------------------------------------------------------------------------


@dataclass
class TrainingPair:
    """A target/condition pair in the condition's model frame."""

    target: np.ndarray
    cond: np.ndarray


def prepare_pair(hf: Volume, lf: Volume) -> TrainingPair:
    """Put LF into its model frame and map HF through the same affine.

    Inference only sees the LF volume, so the target has to live in the
    frame that the LF window defines.
    """
    if hf.dims != lf.dims:
        raise ShapeError(f"HF {hf.dims} and LF {lf.dims} differ in shape")
    lfm = model_frame(lf)
    return TrainingPair(apply_affine(hf.data, lfm.meta["affine"], clamp=False), lfm.data)


@dataclass
class GroupBatch:
    """Clean data for one 2x2x2 group, as (2p + 2h)^3 blocks with halo.

    ``pads`` records how much of each block side lies outside the volume;
    noise drawn for the block is edge-replicated there, matching how
    :mod:`diffiqt.sampling` builds halos.
    """

    x: np.ndarray
    cond: np.ndarray
    pads: tuple
    patch_size: int
    halo: int


def _cut_block(arr: np.ndarray, lo, hi) -> tuple[np.ndarray, tuple]:
    sl, pads = [], []
    for a in range(3):
        n = arr.shape[a]
        sl.append(slice(max(lo[a], 0), min(hi[a], n)))
        pads.append((max(0, -lo[a]), max(0, hi[a] - n)))
    block = arr[tuple(sl)]
    if any(p != (0, 0) for p in pads):
        block = np.pad(block, pads, mode="edge")
    return block, tuple(pads)


def group_at(pair: TrainingPair, origin, p: int, h: int) -> GroupBatch:
    lo = [o - h for o in origin]
    hi = [o + 2 * p + h for o in origin]
    x, pads = _cut_block(pair.target, lo, hi)
    c, _ = _cut_block(pair.cond, lo, hi)
    return GroupBatch(x, c, pads, p, h)


def random_group(pair: TrainingPair, p: int, h: int, rng: np.random.Generator) -> GroupBatch:
    dims = pair.target.shape
    if any(n < 2 * p for n in dims):
        raise ShapeError(f"volume {dims} smaller than a 2x2x2 group of {p}^3 patches")
    origin = [int(rng.integers(0, n - 2 * p + 1)) for n in dims]
    return group_at(pair, origin, p, h)


def split_members(block: np.ndarray, p: int, h: int) -> np.ndarray:
    """(2p+2h)^3 block -> (8, p+2h, p+2h, p+2h) member patches in group order."""
    n = p + 2 * h
    out = np.empty((8, n, n, n), dtype=block.dtype)
    i = 0
    for dz in range(2):
        for dy in range(2):
            for dx in range(2):
                out[i] = block[dz * p : dz * p + n, dy * p : dy * p + n, dx * p : dx * p + n]
                i += 1
    return out


def draw_noise(batch: GroupBatch, rng: np.random.Generator) -> np.ndarray:
    inner = [batch.x.shape[a] - batch.pads[a][0] - batch.pads[a][1] for a in range(3)]
    eps = rng.standard_normal(inner)
    if any(p != (0, 0) for p in batch.pads):
        eps = np.pad(eps, batch.pads, mode="edge")
    return eps


def _interior(t: torch.Tensor, h: int) -> torch.Tensor:
    return t if h == 0 else t[..., h:-h, h:-h, h:-h]


def group_loss(model: Denoiser, batch: GroupBatch, t: float, eps: np.ndarray, sched: NoiseSchedule, kind: str):
    """Noise the block at time t, run the network, compare in ``kind`` space."""
    dtype = next(model.parameters()).dtype
    a, s = alpha_sigma(sched, t)
    x_t_block = a * batch.x.astype(np.float64) + s * eps
    p, h = batch.patch_size, batch.halo
    x_t = torch.from_numpy(split_members(x_t_block, p, h)).to(dtype)[:, None]
    x_c = torch.from_numpy(split_members(batch.cond, p, h)).to(dtype)[:, None]
    out = model(x_t, x_c, t)
    x0 = _interior(torch.from_numpy(split_members(batch.x, p, h)).to(dtype)[:, None], h)
    if kind == "x":
        target = x0
    else:
        x_t_in = _interior(x_t, h)
        target = convert(Prediction("x", x0), kind, x_t_in, t, sched).tensor
    return loss(target, out)


# -- state -------------------------------------------------------------------------


@dataclass
class TrainState:
    model: Denoiser
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    step: int = 0
    history: list = field(default_factory=list)


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)


def init_state(dcfg: DenoiserConfig, tcfg: TrainConfig) -> TrainState:
    model = build_denoiser(dcfg, seed=tcfg.seed, dtype=DTYPES[tcfg.precision])
    return TrainState(model, make_optimizer(model.parameters(), tcfg), np.random.default_rng(tcfg.seed))


def train_step(state: TrainState, batches: Sequence[GroupBatch], sched: NoiseSchedule, cfg: TrainConfig) -> float:
    """One Adam update; each group draws one t shared by all its patches."""
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    total = 0.0
    for batch in batches:
        t = float(state.rng.uniform(0.0, 1.0))
        eps = draw_noise(batch, state.rng)
        value = group_loss(state.model, batch, t, eps, sched, cfg.parametrization) / len(batches)
        scalar = float(value.detach())
        if not math.isfinite(scalar):
            raise RunAbort("non-finite training loss", step=state.step, t=round(t, 6), loss=scalar)
        value.backward()
        total += scalar
    state.optimizer.step()
    state.step += 1
    return total


def validation_loss(model: Denoiser, pairs: Sequence[TrainingPair], cfg: DenoiserConfig, sched: NoiseSchedule,
                    n_groups: int, seed: int, kind: str = "x") -> float:
    """Loss on a fixed, seeded set of (group, t, noise) draws with frozen parameters."""
    if not pairs or n_groups == 0:
        return float("nan")
    rng = np.random.default_rng([seed, 0x5A1])
    model.eval()
    values = []
    with torch.no_grad():
        for i in range(n_groups):
            pair = pairs[i % len(pairs)]
            batch = random_group(pair, cfg.patch_size, cfg.effective_halo, rng)
            t = float(rng.uniform(0.0, 1.0))
            values.append(float(group_loss(model, batch, t, draw_noise(batch, rng), sched, kind)))
    return float(np.mean(values))


def state_to_checkpoint(state: TrainState, dcfg: DenoiserConfig, tcfg: TrainConfig) -> Checkpoint:
    moments = {}
    names = {id(p): n for n, p in state.model.named_parameters()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            st = state.optimizer.state.get(p)
            if st:
                n = names[id(p)]
                moments[f"exp_avg/{n}"] = st["exp_avg"].detach().cpu().numpy().copy()
                moments[f"exp_avg_sq/{n}"] = st["exp_avg_sq"].detach().cpu().numpy().copy()
    return Checkpoint(
        denoiser=dcfg,
        params=params_from_model(state.model),
        moments=moments,
        step=state.step,
        rng_state=state.rng.bit_generator.state,
        train=tcfg,
    )


def state_from_checkpoint(ckpt: Checkpoint) -> TrainState:
    tcfg = ckpt.train or TrainConfig()
    state = init_state(ckpt.denoiser, tcfg)
    load_params(state.model, ckpt.params)
    names = dict(state.model.named_parameters())
    for n, p in names.items():
        if f"exp_avg/{n}" in ckpt.moments:
            state.optimizer.state[p] = {
                "step": torch.tensor(float(ckpt.step)),
                "exp_avg": torch.from_numpy(ckpt.moments[f"exp_avg/{n}"].copy()),
                "exp_avg_sq": torch.from_numpy(ckpt.moments[f"exp_avg_sq/{n}"].copy()),
            }
    if ckpt.rng_state is not None:
        state.rng.bit_generator.state = ckpt.rng_state
    state.step = ckpt.step
    return state


def fit(
    dataset: Sequence[tuple[Volume, Volume]],
    dcfg: DenoiserConfig,
    tcfg: TrainConfig,
    sched: NoiseSchedule = NoiseSchedule(),
    validation: Sequence[tuple[Volume, Volume]] = (),
    manifest: Optional[str | Path] = None,
    callback: Optional[Callable[[int, float], None]] = None,
) -> Checkpoint:
    """Train on (HF, LF) volume pairs; returns the final checkpoint.

    Every ``log_every`` steps (and at the end) a JSON line
    ``{step, t_wall, train_loss, val_loss}`` is appended to ``manifest``.
    """
    if not dataset:
        raise ConfigError("training dataset is empty")
    pairs = [prepare_pair(hf, lf) for hf, lf in dataset]
    val_pairs = [prepare_pair(hf, lf) for hf, lf in validation]
    state = init_state(dcfg, tcfg)
    fh = open(manifest, "a") if manifest is not None else None
    start = time.perf_counter()
    window: list[float] = []
    try:
        for _ in range(tcfg.steps):
            batches = []
            for _ in range(tcfg.grad_accum):
                pair = pairs[int(state.rng.integers(0, len(pairs)))]
                batches.append(random_group(pair, dcfg.patch_size, dcfg.effective_halo, state.rng))
            value = train_step(state, batches, sched, tcfg)
            state.history.append(value)
            window.append(value)
            if callback is not None:
                callback(state.step, value)
            if state.step % tcfg.log_every == 0 or state.step == tcfg.steps:
                record = {"step": state.step, "t_wall": round(time.perf_counter() - start, 3),
                          "train_loss": float(np.mean(window))}
                if val_pairs:
                    record["val_loss"] = validation_loss(state.model, val_pairs, dcfg, sched, tcfg.val_groups,
                                                         tcfg.seed, tcfg.parametrization)
                window = []
                log.info("step %d train %.5f val %s", state.step, record["train_loss"], record.get("val_loss"))
                if fh is not None:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
                    fh.flush()
    finally:
        if fh is not None:
            fh.close()
    ckpt = state_to_checkpoint(state, dcfg, tcfg)
    ckpt.extra["train_loss_history"] = [round(v, 8) for v in state.history]
    return ckpt


# -- gradient checking ------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    n_checked: dict[str, int]
    entries: list[dict]

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0


def gradcheck_config() -> DenoiserConfig:
    """Smallest configuration exercising every layer type (p=8, two stages)."""
    return DenoiserConfig(
        patch_size=8, filters=(4, 8), heads=1, embed_dim=8, token_sizes=(4, 2), dfe_depth=1, halo=2, norm_groups=4
    )


def _randomize(model: torch.nn.Module, rng: torch.Generator, scale: float = 0.2) -> None:
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=rng, dtype=p.dtype))


def gradient_check(
    cfg: Optional[DenoiserConfig] = None,
    eps_fd: float = 1e-4,
    n_params: int = 60,
    seed: int = 0,
    model: Optional[torch.nn.Module] = None,
    loss_fn: Optional[Callable[[torch.nn.Module], torch.Tensor]] = None,
    corrupt: Optional[Callable[[str, torch.Tensor], torch.Tensor]] = None,
    classify: Callable[[str], str] = parameter_class,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd gradients to central finite differences in float64.

    Scalars are drawn evenly across parameter classes. By default the full
    denoiser is checked with randomly perturbed weights (the zero-initialized
    layers would otherwise hide every upstream gradient) on one random group.
    ``corrupt`` rewrites analytic gradients before comparison, for testing
    the checker itself.

    Relative error is |a - n| / max(|a|, |n|, abs_floor); the floor keeps
    gradients near zero, where the central difference is dominated by
    roundoff (~1e-12 absolute), from reporting spurious relative error.
    """
    gen = torch.Generator().manual_seed(seed)
    if model is None:
        cfg = cfg or gradcheck_config()
        model = build_denoiser(cfg, seed=seed, dtype=torch.float64)
        _randomize(model, gen)
    model = model.double()
    if loss_fn is None:
        if cfg is None:
            raise ConfigError("a custom model needs a custom loss_fn")
        n, g = cfg.input_extent, cfg.effective_group
        x_t = torch.randn(g, 1, n, n, n, generator=gen, dtype=torch.float64)
        x_c = torch.randn(g, 1, n, n, n, generator=gen, dtype=torch.float64)
        target = torch.randn(g, 1, cfg.patch_size, cfg.patch_size, cfg.patch_size, generator=gen, dtype=torch.float64)
        t = 0.37

        def loss_fn(m):
            return loss(target, m(x_t, x_c, t))

    model.zero_grad(set_to_none=True)
    loss_fn(model).backward()
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    by_class: dict[str, list] = {}
    for n, p in named:
        by_class.setdefault(classify(n), []).append((n, p))
    pick = np.random.default_rng(seed)
    classes = sorted(by_class)
    per_class = max(1, math.ceil(n_params / len(classes)))
    entries = []
    with torch.no_grad():
        for cls in classes:
            members = by_class[cls]
            sizes = np.array([p.numel() for _, p in members], dtype=float)
            for _ in range(per_class):
                n, p = members[int(pick.choice(len(members), p=sizes / sizes.sum()))]
                idx = int(pick.integers(0, p.numel()))
                grad = p.grad.reshape(-1) if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
                if corrupt is not None:
                    grad = corrupt(n, grad.clone())
                analytic = float(grad[idx])
                flat = p.view(-1)
                orig = float(flat[idx])
                flat[idx] = orig + eps_fd
                up = float(loss_fn(model))
                flat[idx] = orig - eps_fd
                down = float(loss_fn(model))
                flat[idx] = orig
                numeric = (up - down) / (2 * eps_fd)
                denom = max(abs(analytic), abs(numeric), abs_floor)
                entries.append({"class": cls, "name": n, "index": idx, "analytic": analytic, "numeric": numeric,
                                "rel_error": abs(analytic - numeric) / denom})
    max_err = {c: max(e["rel_error"] for e in entries if e["class"] == c) for c in classes}
    counts = {c: sum(e["class"] == c for e in entries) for c in classes}
    return GradCheckReport(max_err, counts, entries)
