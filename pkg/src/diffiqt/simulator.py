"""Synthetic low-field degradation along the slice axis, and the interpolation baseline."""

from __future__ import annotations

import math

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import gaussian_filter1d

from .config import DecimationSpec
from .errors import ShapeError
from .volume import Volume

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


def _padded_extent(n: int, k: int, pad: bool) -> int:
    if n % k == 0:
        return n
    if not pad:
        raise ShapeError(f"slice extent {n} is not a multiple of decimation factor {k}")
    return n + (k - n % k)


def degrade_slices(hf: Volume, spec: DecimationSpec) -> Volume:
    """Blur along the slice axis, keep every k-th slice, add Gaussian noise.

    Returns only the acquired slices (extent n/k along ``slice_axis``).
    """
    k, axis = spec.factor, spec.slice_axis
    n = hf.dims[axis]
    if spec.fwhm >= n:
        raise ShapeError(f"blur FWHM {spec.fwhm} must be smaller than the slice extent {n}")
    target = _padded_extent(n, k, spec.pad)
    data = hf.data.astype(np.float64)
    if target != n:
        widths = [(0, 0)] * 3
        widths[axis] = (0, target - n)
        data = np.pad(data, widths, mode="reflect" if target - n < n else "edge")
    if spec.fwhm > 0:
        data = gaussian_filter1d(data, spec.fwhm * FWHM_TO_SIGMA, axis=axis, mode="nearest", truncate=4.0)
    slices = np.take(data, np.arange(0, target, k), axis=axis)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        slices = slices + spec.noise_sigma * rng.standard_normal(slices.shape)
    spacing = list(hf.spacing)
    spacing[axis] *= k
    meta = dict(hf.meta, decimation=spec.model_dump(), source_extent=n)
    return Volume(slices.astype(np.float32), spacing=tuple(spacing), meta=meta)


def _knots(n_slices: int, k: int) -> np.ndarray:
    return np.arange(n_slices, dtype=np.float64) * k


def upsample_linear(slices: np.ndarray, k: int, axis: int, extent: int) -> np.ndarray:
    """Piecewise-linear resampling from knots at 0, k, 2k, ... onto 0..extent-1.

    The last segment is extended linearly past the final knot, so affine
    profiles are reproduced exactly everywhere.
    """
    n = slices.shape[axis]
    moved = np.moveaxis(slices.astype(np.float64), axis, 0)
    if n == 1:
        out = np.repeat(moved, extent, axis=0)
        return np.moveaxis(out, 0, axis)
    pos = np.arange(extent, dtype=np.float64) / k
    left = np.clip(np.floor(pos).astype(int), 0, n - 2)
    frac = (pos - left)[:, None, None]
    out = moved[left] * (1.0 - frac) + moved[left + 1] * frac
    return np.moveaxis(out, 0, axis)


def decimate(hf: Volume, spec: DecimationSpec) -> Volume:
    """Simulated low-field volume on the high-field grid.

    Same dims and spacing as ``hf``; the acquired slice spacing is recorded in
    ``meta["acquired_spacing"]``.
    """
    slices = degrade_slices(hf, spec)
    n = hf.dims[spec.slice_axis]
    out = upsample_linear(slices.data, spec.factor, spec.slice_axis, n)
    meta = dict(slices.meta, acquired_spacing=slices.spacing)
    return Volume(out.astype(np.float32), spacing=hf.spacing, meta=meta)


def interpolation_baseline(lf_slices_only: Volume, k: int, slice_axis: int = 0, extent: int | None = None) -> Volume:
    """Cubic-spline (not-a-knot) upsampling of acquired slices to full resolution.

    With fewer than 4 slices the spline is replaced by linear interpolation
    and ``meta["interpolation_fallback"]`` is set.
    """
    n = lf_slices_only.dims[slice_axis]
    extent = n * k if extent is None else extent
    spacing = list(lf_slices_only.spacing)
    spacing[slice_axis] /= k
    meta = dict(lf_slices_only.meta)
    if k == 1 and extent == n:
        return Volume(lf_slices_only.data.copy(), spacing=tuple(spacing), meta=meta)
    if n < 4:
        out = upsample_linear(lf_slices_only.data, k, slice_axis, extent)
        meta["interpolation_fallback"] = "linear"
    else:
        spline = CubicSpline(_knots(n, k), lf_slices_only.data.astype(np.float64), axis=slice_axis, bc_type="not-a-knot")
        out = spline(np.arange(extent, dtype=np.float64))
    return Volume(out.astype(np.float32), spacing=tuple(spacing), meta=meta)
