"""Volume container, binary I/O, intensity normalization and phantom generation."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import PhantomSpec
from .errors import FormatError, InputError, TruncatedFileError

MAGIC = b"IQTV"
VERSION = 1
_HEADER = struct.Struct("<4sB3I3f2f")


@dataclass
class Volume:
    """A 3D float32 scalar grid in (d, h, w) order.

    ``meta`` carries non-persisted provenance (normalization affine, warnings,
    acquisition notes); it is not written to disk.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    range: tuple[float, float] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise InputError(f"volume data must be a non-empty 3D array, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise InputError("volume contains non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)
        lo, hi = float(self.data.min()), float(self.data.max())
        if self.range is None:
            self.range = (lo, hi)
        else:
            self.range = (float(self.range[0]), float(self.range[1]))
            if self.range[0] > lo or self.range[1] < hi:
                raise InputError(f"range {self.range} does not bound data [{lo}, {hi}]")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data, **changes) -> "Volume":
        """Copy with new voxel values; the range is recomputed unless given."""
        changes.setdefault("range", None)
        changes.setdefault("meta", dict(self.meta))
        return replace(self, data=data, **changes)


def save_volume(v: Volume, path) -> None:
    d, h, w = v.dims
    header = _HEADER.pack(MAGIC, VERSION, d, h, w, *v.spacing, *v.range)
    payload = v.data.astype("<f4", copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, version, d, h, w, sd, sh, sw, lo, hi = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    n = d * h * w
    expected = _HEADER.size + 4 * n
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: payload has {len(raw) - _HEADER.size} bytes, expected {4 * n}")
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=_HEADER.size).reshape(d, h, w)
    return Volume(data.astype(np.float32), spacing=(sd, sh, sw), range=(lo, hi))


def normalize(v: Volume, lo_pct: float = 1.0, hi_pct: float = 99.0) -> Volume:
    """Map the [p1, p99] window affinely onto [-1, 1] and clamp.

    The window is stored as ``meta["affine"] = (p_lo, p_hi)`` for
    :func:`denormalize`. A degenerate window maps every voxel to 0.
    """
    p_lo, p_hi = percentile_window(v, lo_pct, hi_pct)
    if p_hi - p_lo <= 0.0:
        out = np.zeros_like(v.data)
    else:
        out = apply_affine(v.data, (p_lo, p_hi))
    meta = dict(v.meta, affine=(p_lo, p_hi))
    return v.with_data(out, range=(-1.0, 1.0), meta=meta)


def percentile_window(v: Volume, lo_pct: float = 1.0, hi_pct: float = 99.0) -> tuple[float, float]:
    p_lo, p_hi = np.percentile(v.data.astype(np.float64), [lo_pct, hi_pct])
    return float(p_lo), float(p_hi)


def model_frame(v: Volume, lo_pct: float = 1.0, hi_pct: float = 99.0) -> Volume:
    """Same affine as :func:`normalize`, without the clamp.

    Model inputs and targets live in this frame. Blur lowers the LF's upper
    percentile, so clamping would flatten HF structure brighter than the LF
    window.
    """
    window = percentile_window(v, lo_pct, hi_pct)
    return v.with_data(apply_affine(v.data, window, clamp=False), meta=dict(v.meta, affine=window))


def apply_affine(data: np.ndarray, affine: tuple[float, float], clamp: bool = True) -> np.ndarray:
    p_lo, p_hi = affine
    if p_hi - p_lo <= 0.0:
        return np.zeros_like(data, dtype=np.float32)
    out = (2.0 * (data.astype(np.float64) - p_lo) / (p_hi - p_lo) - 1.0)
    if clamp:
        out = np.clip(out, -1.0, 1.0)
    return out.astype(np.float32)


def denormalize(v: Volume, affine: tuple[float, float] | None = None) -> Volume:
    affine = affine if affine is not None else v.meta.get("affine")
    if affine is None:
        raise InputError("volume carries no normalization affine")
    p_lo, p_hi = affine
    out = (v.data.astype(np.float64) + 1.0) * 0.5 * (p_hi - p_lo) + p_lo
    meta = {k: val for k, val in v.meta.items() if k != "affine"}
    return v.with_data(out.astype(np.float32), meta=meta)


# -- phantoms -----------------------------------------------------------------


def _background_terms(rng: np.random.Generator) -> list[dict]:
    terms = []
    for _ in range(3):
        terms.append(
            {
                "amp": float(rng.uniform(0.15, 0.35)),
                "freq": tuple(float(f) for f in rng.uniform(0.3, 1.2, size=3)),
                "phase": tuple(float(p) for p in rng.uniform(0.0, 2 * np.pi, size=3)),
            }
        )
    return terms


def background_field(terms: list[dict], dims) -> np.ndarray:
    """Sum of separable cosines; ``freq`` is in cycles per volume extent."""
    axes = [np.arange(n, dtype=np.float64) / n for n in dims]
    out = np.zeros(dims, dtype=np.float64)
    for term in terms:
        f = [np.cos(2 * np.pi * term["freq"][a] * axes[a] + term["phase"][a]) for a in range(3)]
        out += term["amp"] * f[0][:, None, None] * f[1][None, :, None] * f[2][None, None, :]
    return out


def _add_ellipsoids(vol: np.ndarray, n: int, rng: np.random.Generator) -> None:
    dims = np.array(vol.shape)
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in vol.shape], indexing="ij")
    for _ in range(n):
        center = rng.uniform(0.2, 0.8, size=3) * dims
        radii = rng.uniform(0.08, 0.25, size=3) * dims
        value = rng.uniform(-0.6, 0.6)
        r2 = sum(((grids[a] - center[a]) / radii[a]) ** 2 for a in range(3))
        vol[r2 <= 1.0] += value


def _add_sheets(vol: np.ndarray, n: int, rng: np.random.Generator) -> None:
    dims = vol.shape
    occupied = np.zeros(dims, dtype=bool)
    placed = attempts = 0
    while placed < n and attempts < 200 * max(n, 1):
        attempts += 1
        axis = int(rng.integers(0, 3))
        lo, hi = [], []
        for a in range(3):
            if a == axis:
                pos = int(rng.integers(2, dims[a] - 2))
                lo.append(pos)
                hi.append(pos + 1)
            else:
                extent = int(rng.integers(dims[a] // 4, dims[a] // 2))
                start = int(rng.integers(1, dims[a] - extent - 1))
                lo.append(start)
                hi.append(start + extent)
        guard = tuple(slice(max(l - 2, 0), h + 2) for l, h in zip(lo, hi))
        if occupied[guard].any():
            continue
        region = tuple(slice(l, h) for l, h in zip(lo, hi))
        vol[region] += rng.uniform(0.8, 1.2)
        occupied[region] = True
        placed += 1


def generate_phantom(spec: PhantomSpec) -> Volume:
    """Deterministic synthetic head-like volume.

    Components use independent random streams, so toggling one (e.g.
    ``n_sheets=0``) leaves the others bit-identical.
    """
    bg_ss, ell_ss, sheet_ss, noise_ss = np.random.SeedSequence(spec.seed).spawn(4)
    dims = tuple(spec.dims)
    vol = background_field(_background_terms(np.random.default_rng(bg_ss)), dims)
    _add_ellipsoids(vol, spec.n_ellipsoids, np.random.default_rng(ell_ss))
    _add_sheets(vol, spec.n_sheets, np.random.default_rng(sheet_ss))
    if spec.noise_sigma > 0:
        vol += spec.noise_sigma * np.random.default_rng(noise_ss).standard_normal(dims)
    return Volume(vol.astype(np.float32), spacing=spec.spacing, meta={"phantom_seed": spec.seed})


def phantom_background_terms(spec: PhantomSpec) -> list[dict]:
    """The background cosine terms :func:`generate_phantom` draws for ``spec``."""
    bg_ss = np.random.SeedSequence(spec.seed).spawn(4)[0]
    return _background_terms(np.random.default_rng(bg_ss))
