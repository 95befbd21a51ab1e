"""Typed configuration for every stage of the pipeline.

All models reject unknown keys so a typo in a JSON config fails loudly
instead of silently falling back to a default.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PhantomSpec(_Strict):
    seed: int = Field(0, ge=0)
    dims: tuple[int, int, int] = (48, 48, 48)
    spacing: tuple[float, float, float] = (0.7, 0.7, 0.7)
    n_ellipsoids: int = Field(6, ge=0)
    n_sheets: int = Field(4, ge=0)
    noise_sigma: float = Field(0.01, ge=0.0)

    @field_validator("dims")
    @classmethod
    def _dims_min(cls, v):
        if any(d < 16 for d in v):
            raise ValueError("phantom dims must each be >= 16")
        return v


class DecimationSpec(_Strict):
    factor: int = Field(8, ge=1)
    # None means factor * 0.75
    blur_fwhm_slices: Optional[float] = Field(None, ge=0.0)
    noise_sigma: float = Field(0.02, ge=0.0)
    seed: int = Field(0, ge=0)
    slice_axis: int = Field(0, ge=0, le=2)
    pad: bool = True

    @property
    def fwhm(self) -> float:
        return self.factor * 0.75 if self.blur_fwhm_slices is None else self.blur_fwhm_slices


class DenoiserConfig(_Strict):
    patch_size: int = 16
    in_channels: Literal[2] = 2
    filters: tuple[int, ...] = (8, 16, 32)
    heads: int = 2
    embed_dim: int = 32
    token_sizes: tuple[int, ...] = (4, 2, 1)
    dfe_depth: int = Field(4, ge=0)
    shuffle_factor: int = 2
    halo: int = Field(4, ge=0)
    cross_batch: bool = True
    group_size: int = 8
    norm_groups: int = 4
    skip_scale: float = 1.0 / math.sqrt(2.0)
    activation: Literal["mish"] = "mish"
    time_scale: float = 1000.0

    @model_validator(mode="after")
    def _check_geometry(self):
        n = len(self.filters)
        if n < 1 or len(self.token_sizes) != n:
            raise ValueError("token_sizes must give one entry per filter stage")
        r = self.shuffle_factor
        if self.patch_size % (r ** (n - 1)):
            raise ValueError(f"patch_size {self.patch_size} not divisible by {r}^{n - 1}")
        for i in range(n):
            extent = self.stage_extent(i)
            if extent % self.token_sizes[i]:
                raise ValueError(f"stage {i} extent {extent} not divisible by token size {self.token_sizes[i]}")
        if self.embed_dim % self.heads:
            raise ValueError("heads must divide embed_dim")
        for f in self.filters:
            if f % self.norm_groups:
                raise ValueError(f"norm_groups {self.norm_groups} must divide filter count {f}")
        return self

    @property
    def n_stages(self) -> int:
        return len(self.filters)

    @property
    def effective_halo(self) -> int:
        return self.halo if self.cross_batch else 0

    @property
    def effective_group(self) -> int:
        return self.group_size if self.cross_batch else 1

    @property
    def input_extent(self) -> int:
        return self.patch_size + 2 * self.effective_halo

    def stage_extent(self, i: int) -> int:
        if i == 0:
            return self.input_extent
        return self.patch_size // self.shuffle_factor**i


def full_size_denoiser_config(**overrides) -> DenoiserConfig:
    """Full-size hyperparameters (32^3 input, [64,128,256] filters, 8 heads, 512-d embedding)."""
    base = dict(
        patch_size=32, filters=(64, 128, 256), heads=8, embed_dim=512, token_sizes=(4, 4, 2), halo=4
    )
    base.update(overrides)
    return DenoiserConfig(**base)


class TrainConfig(_Strict):
    learning_rate: float = Field(1e-4, gt=0.0)
    steps: int = Field(2000, ge=0)
    seed: int = Field(0, ge=0)
    parametrization: Literal["x", "epsilon", "v"] = "x"
    precision: Literal["float32", "float64"] = "float32"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_accum: int = Field(1, ge=1)
    log_every: int = Field(100, ge=1)
    val_groups: int = Field(4, ge=0)


class SamplerConfig(_Strict):
    T: int = Field(20, ge=1)
    seed: int = Field(0, ge=0)
    clip_x: bool = True
    groups_per_batch: int = Field(4, ge=1)


class MetricsConfig(_Strict):
    scales: int = Field(3, ge=1, le=5)
    data_range: float = Field(2.0, gt=0.0)


class CorpusConfig(_Strict):
    n_volumes: int = Field(10, ge=1)
    phantom: PhantomSpec = PhantomSpec()
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)

    @field_validator("split")
    @classmethod
    def _split_sums(cls, v):
        if abs(sum(v) - 1.0) > 1e-9 or any(x < 0 for x in v):
            raise ValueError("split fractions must be non-negative and sum to 1")
        return v


class AblationConfig(_Strict):
    steps: int = Field(300, ge=0)
    dfe_depth: int = Field(4, ge=1)


class RunConfig(_Strict):
    seed: int = Field(0, ge=0)
    out: str = "runs/default"
    corpus: CorpusConfig = CorpusConfig()
    decimation: DecimationSpec = DecimationSpec(factor=4)
    # desk scale: smaller patches, wider filters, larger effective batch, faster lr
    denoiser: DenoiserConfig = DenoiserConfig(patch_size=8, halo=2, filters=(16, 32, 64))
    train: TrainConfig = TrainConfig(learning_rate=1e-3, grad_accum=4)
    # model-frame targets can leave [-1, 1]; see volume.model_frame
    sampler: SamplerConfig = SamplerConfig(clip_x=False)
    metrics: MetricsConfig = MetricsConfig()
    ablation: AblationConfig = AblationConfig()


def _coerce(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``key.sub=value`` overrides to a nested dict; values are parsed as JSON when possible."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {key!r} crosses a scalar")
        node[parts[-1]] = _coerce(value)
    return data


def load_run_config(path: Optional[str | Path] = None, overrides=(), seed=None, out=None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
    data = apply_overrides(data, list(overrides))
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["out"] = str(out)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def dump_config(cfg: BaseModel) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True)
