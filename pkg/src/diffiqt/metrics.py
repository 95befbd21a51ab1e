"""Fidelity metrics for volumes: PSNR, 3D (MS-)SSIM and a patch-seam diagnostic."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeError
from .patching import PatchGrid
from .volume import Volume

MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _arr(v) -> np.ndarray:
    return (v.data if isinstance(v, Volume) else np.asarray(v)).astype(np.float64)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"volumes differ in shape: {a.shape} vs {b.shape}")


def mse(pred, ref) -> float:
    a, b = _arr(pred), _arr(ref)
    _same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(pred, ref, data_range: float = 2.0) -> float:
    """10 log10(range^2 / MSE) in dB; ``math.inf`` when the inputs are identical."""
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    err = mse(pred, ref)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / err)


def gaussian_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _filter_valid(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    r = len(w) // 2
    for axis in range(3):
        a = correlate1d(a, w, axis=axis, mode="nearest")
    return a[r:-r, r:-r, r:-r]


@dataclass
class SSIMTerms:
    ssim: float
    luminance: float
    contrast_structure: float


def ssim_terms(pred, ref, data_range: float = 2.0) -> SSIMTerms:
    """Single-scale 3D SSIM over all valid 11^3 Gaussian windows."""
    x, y = _arr(pred), _arr(ref)
    _same_shape(x, y)
    if min(x.shape) < WINDOW:
        raise ShapeError(f"volume {x.shape} smaller than the {WINDOW}^3 window")
    w = gaussian_window()
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mx, my = _filter_valid(x, w), _filter_valid(y, w)
    sxx = _filter_valid(x * x, w) - mx * mx
    syy = _filter_valid(y * y, w) - my * my
    sxy = _filter_valid(x * y, w) - mx * my
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return SSIMTerms(float(np.mean(lum * cs)), float(np.mean(lum)), float(np.mean(cs)))


def ssim(pred, ref, data_range: float = 2.0) -> float:
    return ssim_terms(pred, ref, data_range).ssim


def _pool2(a: np.ndarray) -> np.ndarray:
    d, h, w = (s - s % 2 for s in a.shape)
    a = a[:d, :h, :w]
    return a.reshape(d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(1, 3, 5))


def mssim_detail(pred, ref, scales: int = 3, data_range: float = 2.0) -> dict:
    """Multi-scale SSIM with per-scale terms.

    Weights are the standard five-scale weights truncated to ``scales`` and
    renormalized. Negative per-scale terms are clamped to zero before the
    weighted product, so the result lies in [0, 1]. Volumes too small for
    ``scales`` levels fall back to single-scale SSIM (``fallback=True``).
    """
    x, y = _arr(pred), _arr(ref)
    _same_shape(x, y)
    need = 2 ** (scales - 1) * WINDOW
    fallback = min(x.shape) < need
    if fallback:
        warnings.warn(f"volume {x.shape} too small for {scales}-scale MS-SSIM; using single scale", stacklevel=2)
        scales = 1
    weights = np.array(MS_WEIGHTS[:scales])
    weights = weights / weights.sum()
    terms = []
    for j in range(scales):
        terms.append(ssim_terms(x, y, data_range))
        if j < scales - 1:
            x, y = _pool2(x), _pool2(y)
    value = 1.0
    for j, (wt, term) in enumerate(zip(weights, terms)):
        base = term.ssim if j == scales - 1 else term.contrast_structure
        value *= max(base, 0.0) ** wt
    return {
        "mssim": float(min(max(value, 0.0), 1.0)),
        "scales": scales,
        "weights": weights.tolist(),
        "terms": [asdict(t) for t in terms],
        "fallback": fallback,
    }


def mssim(pred, ref, scales: int = 3, data_range: float = 2.0) -> float:
    return mssim_detail(pred, ref, scales, data_range)["mssim"]


def _second_diff_plane(a: np.ndarray, axis: int, i: int) -> float:
    lo = np.take(a, i - 1, axis=axis)
    mid = np.take(a, i, axis=axis)
    hi = np.take(a, i + 1, axis=axis)
    return float(np.mean(np.abs(lo - 2 * mid + hi)))


def seam_score(v, grid: PatchGrid) -> float:
    """Boundary-to-interior ratio of mean |second difference|.

    For every internal patch boundary (between voxels b-1 and b) the two
    straddling planes b-1 and b are compared against the interior planes
    b-4, b-3, b+2 and b+3 of the adjacent patches. About 1 means no seam; a
    constant volume scores exactly 1.
    """
    a = _arr(v)
    if tuple(a.shape) != tuple(grid.source_dims):
        raise ShapeError(f"volume {a.shape} does not match grid source dims {grid.source_dims}")
    p = grid.patch_size
    seam, ref = [], []
    for axis in range(3):
        n = a.shape[axis]
        for k in range(1, grid.grid_dims[axis]):
            b = k * p - grid.pad_before[axis]
            straddle = [b - 1, b]
            interior = [b - 4, b - 3, b + 2, b + 3]
            if min(straddle + interior) < 1 or max(straddle + interior) > n - 2:
                continue
            seam += [_second_diff_plane(a, axis, i) for i in straddle]
            ref += [_second_diff_plane(a, axis, i) for i in interior]
    if not seam:
        return 1.0
    num, den = float(np.mean(seam)), float(np.mean(ref))
    if den == 0.0:
        return 1.0 if num == 0.0 else math.inf
    return num / den


@dataclass
class MetricsReport:
    psnr_db: float
    mssim: float
    seam_score: Optional[float] = None
    per_volume: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    # reserved: need pretrained networks that are not part of this package
    lpips: Optional[float] = None
    miou: Optional[float] = None

    def to_dict(self) -> dict:
        return jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def jsonable(obj):
    """Infinities become "inf"/"-inf" and NaN becomes null, so output is strict JSON."""
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    return obj


def evaluate_pairs(pairs, data_range: float = 2.0, scales: int = 3, grid: Optional[PatchGrid] = None,
                   names=None, provenance=None) -> MetricsReport:
    """Median PSNR / MS-SSIM (and seam score) over (pred, ref) volume pairs."""
    rows = []
    for i, (pred, ref) in enumerate(pairs):
        row = {
            "name": names[i] if names else str(i),
            "psnr_db": psnr(pred, ref, data_range),
            "mssim": mssim(pred, ref, scales, data_range),
        }
        if grid is not None:
            row["seam_score"] = seam_score(pred, grid)
        rows.append(row)
    med = lambda key: float(np.median([r[key] for r in rows])) if rows else float("nan")  # noqa: E731
    return MetricsReport(
        psnr_db=med("psnr_db"),
        mssim=med("mssim"),
        seam_score=med("seam_score") if grid is not None else None,
        per_volume=rows,
        provenance=dict(provenance or {}, data_range=data_range, mssim_scales=scales),
    )
