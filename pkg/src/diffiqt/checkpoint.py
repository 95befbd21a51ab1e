"""Versioned binary checkpoints.

Layout (little-endian)::

    b"IQTC"  u8 version
    u32 n    n bytes of UTF-8 JSON (sorted keys): configs, step, rng state
    u32 count
    count x [u16 name_len, name, u8 dtype (0=f32, 1=f64), u8 ndim, ndim x u32]
    payloads, in table order, C-contiguous
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import DenoiserConfig, TrainConfig
from .denoiser import Denoiser, build_denoiser
from .errors import ConfigError, FormatError, TruncatedFileError

MAGIC = b"IQTC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


@dataclass
class Checkpoint:
    denoiser: DenoiserConfig
    params: dict[str, np.ndarray]
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    rng_state: Optional[dict] = None
    train: Optional[TrainConfig] = None
    extra: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "denoiser": self.denoiser.model_dump(mode="json"),
            "train": None if self.train is None else self.train.model_dump(mode="json"),
            "step": self.step,
            "rng_state": self.rng_state,
            "extra": self.extra,
        }

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v for k, v in self.params.items()}
        out.update({f"moment/{k}": v for k, v in self.moments.items()})
        return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    header = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":")).encode()
    tensors = ckpt.tensors()
    parts = [MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(header)), header]
    parts.append(struct.pack("<I", len(tensors)))
    payloads = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _CODES:
            raise FormatError(f"tensor {name} has unsupported dtype {arr.dtype}")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payloads.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    Path(path).write_bytes(b"".join(parts + payloads))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedFileError(f"{self.path}: unexpected end of file at byte {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_checkpoint(path, expect: Optional[DenoiserConfig] = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<B")
    if version != VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {VERSION}")
    (n,) = r.unpack("<I")
    header = json.loads(r.take(n).decode())
    (count,) = r.unpack("<I")
    table = []
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"{path}: tensor {name} has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        table.append((name, _DTYPES[code], tuple(shape)))
    params, moments = {}, {}
    for name, dtype, shape in table:
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(r.take(size), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        kind, _, key = name.partition("/")
        if kind == "param":
            params[key] = arr
        elif kind == "moment":
            moments[key] = arr
        else:
            raise FormatError(f"{path}: unexpected tensor name {name!r}")
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes")
    cfg = DenoiserConfig.model_validate(header["denoiser"])
    if expect is not None and cfg != expect:
        raise ConfigError(f"{path}: checkpoint denoiser config does not match the requested one")
    train = None if header.get("train") is None else TrainConfig.model_validate(header["train"])
    return Checkpoint(cfg, params, moments, header["step"], header.get("rng_state"), train, header.get("extra", {}))


def params_from_model(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.named_parameters()}


def load_params(model: torch.nn.Module, params: dict[str, np.ndarray]) -> None:
    names = dict(model.named_parameters())
    if set(names) != set(params):
        missing = sorted(set(names) - set(params))[:3]
        unexpected = sorted(set(params) - set(names))[:3]
        raise ConfigError(f"parameter names differ (missing {missing}, unexpected {unexpected})")
    with torch.no_grad():
        for k, p in names.items():
            if tuple(p.shape) != params[k].shape:
                raise ConfigError(f"parameter {k}: shape {params[k].shape}, model expects {tuple(p.shape)}")
            p.copy_(torch.from_numpy(params[k]))


def model_from_checkpoint(ckpt: Checkpoint, dtype=None) -> Denoiser:
    if dtype is None:
        first = next(iter(ckpt.params.values()), None)
        dtype = torch.float64 if first is not None and first.dtype == np.float64 else torch.float32
    model = build_denoiser(ckpt.denoiser, dtype=dtype)
    load_params(model, ckpt.params)
    model.eval()
    return model
