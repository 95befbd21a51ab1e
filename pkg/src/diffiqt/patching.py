"""Non-overlapping patch grids, 2x2x2 cross-batch groups, halos and stitching."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .volume import Volume

GROUP_SHAPE = (2, 2, 2)


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    grid_dims: tuple[int, int, int]
    pad_before: tuple[int, int, int]
    pad_after: tuple[int, int, int]
    source_dims: tuple[int, int, int]

    @property
    def n_patches(self) -> int:
        return int(np.prod(self.grid_dims))

    @property
    def padded_dims(self) -> tuple[int, int, int]:
        return tuple(g * self.patch_size for g in self.grid_dims)

    def index_of(self, coord) -> int:
        return int(np.ravel_multi_index(tuple(coord), self.grid_dims))

    def coord_of(self, index: int) -> tuple[int, int, int]:
        return tuple(int(c) for c in np.unravel_index(index, self.grid_dims))

    def origin(self, coord) -> tuple[int, int, int]:
        """Voxel offset of a patch inside the padded volume."""
        return tuple(int(c) * self.patch_size for c in coord)


@dataclass(frozen=True)
class Patch:
    coord: tuple[int, int, int]
    data: np.ndarray


@dataclass(frozen=True)
class PatchGroup:
    """A 2x2x2 block of grid coordinates.

    ``duplicate[i]`` marks members that only exist because the grid was
    padded to an even count along some axis; their ``coords`` point at the
    real patch they copy, and stitching must skip them.
    """

    origin: tuple[int, int, int]
    coords: tuple[tuple[int, int, int], ...]
    duplicate: tuple[bool, ...]

    @property
    def member_ids(self) -> np.ndarray:
        return np.arange(8).reshape(GROUP_SHAPE)

    def __len__(self):
        return len(self.coords)


@dataclass
class Halo:
    """A patch padded by ``width`` voxels of neighbor context on every side."""

    padded: np.ndarray
    width: int

    @property
    def interior(self) -> np.ndarray:
        w = self.width
        if w == 0:
            return self.padded
        return self.padded[w:-w, w:-w, w:-w]

    def face(self, axis: int, side: int) -> np.ndarray:
        """Slab of the halo on one face; ``side`` is -1 (low) or +1 (high)."""
        w = self.width
        idx = [slice(w, self.padded.shape[a] - w) for a in range(3)]
        n = self.padded.shape[axis]
        idx[axis] = slice(0, w) if side < 0 else slice(n - w, n)
        return self.padded[tuple(idx)]


def make_grid(dims, p: int) -> PatchGrid:
    if p < 1:
        raise ShapeError("patch size must be positive")
    grid, before, after = [], [], []
    for n in dims:
        g = -(-n // p)
        total = g * p - n
        grid.append(g)
        before.append(total // 2)
        after.append(total - total // 2)
    return PatchGrid(p, tuple(grid), tuple(before), tuple(after), tuple(int(n) for n in dims))


def pad_to_grid(data: np.ndarray, grid: PatchGrid) -> np.ndarray:
    widths = list(zip(grid.pad_before, grid.pad_after))
    if all(b == 0 and a == 0 for b, a in widths):
        return data
    # numpy reflect needs pad < extent; fall back to symmetric-then-edge growth otherwise
    if all(max(b, a) < n for (b, a), n in zip(widths, data.shape)):
        return np.pad(data, widths, mode="reflect")
    return np.pad(data, widths, mode="symmetric")


def extract_patches(v: Volume | np.ndarray, p: int) -> tuple[PatchGrid, list[Patch]]:
    """Reflect-pad to a multiple of ``p`` and cut non-overlapping patches in grid (C) order."""
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    if p < 8:
        raise ShapeError(f"patch size {p} below minimum of 8")
    grid = make_grid(data.shape, p)
    if any(p > g * p for g in grid.grid_dims):
        raise ShapeError("patch larger than padded extent")
    padded = pad_to_grid(data, grid)
    patches = []
    for coord in itertools.product(*[range(g) for g in grid.grid_dims]):
        o = grid.origin(coord)
        patches.append(Patch(coord, padded[o[0] : o[0] + p, o[1] : o[1] + p, o[2] : o[2] + p].copy()))
    return grid, patches


def group_grid_dims(grid: PatchGrid) -> tuple[int, int, int]:
    return tuple(g + (g % 2) for g in grid.grid_dims)


def make_groups(grid: PatchGrid) -> list[PatchGroup]:
    """Partition the grid into 2x2x2 blocks.

    Odd grid extents are padded by repeating the last slab of patches;
    repeated members are flagged as duplicates.
    """
    even = group_grid_dims(grid)
    groups = []
    for origin in itertools.product(*[range(0, e, 2) for e in even]):
        coords, dup = [], []
        for off in itertools.product(range(2), range(2), range(2)):
            c = tuple(o + d for o, d in zip(origin, off))
            real = tuple(min(ci, g - 1) for ci, g in zip(c, grid.grid_dims))
            coords.append(real)
            dup.append(real != c)
        groups.append(PatchGroup(tuple(origin), tuple(coords), tuple(dup)))
    return groups


def gather_halo(v_padded: np.ndarray, grid: PatchGrid, patch_id, w_h: int) -> Halo:
    """Patch ``patch_id`` (flat index or grid coordinate) with ``w_h`` voxels of context.

    ``v_padded`` is the volume already padded to the grid; context outside it
    replicates the edge voxel.
    """
    coord = grid.coord_of(patch_id) if np.isscalar(patch_id) else tuple(patch_id)
    if tuple(v_padded.shape) != grid.padded_dims:
        raise ShapeError(f"padded volume {v_padded.shape} does not match grid {grid.padded_dims}")
    p = grid.patch_size
    o = grid.origin(coord)
    if w_h == 0:
        return Halo(v_padded[o[0] : o[0] + p, o[1] : o[1] + p, o[2] : o[2] + p].copy(), 0)
    ext = np.pad(v_padded, w_h, mode="edge")
    n = p + 2 * w_h
    # offset o - w_h in v_padded is offset o in ext
    return Halo(ext[o[0] : o[0] + n, o[1] : o[1] + n, o[2] : o[2] + n].copy(), w_h)


def halo_source(v_padded: np.ndarray, w_h: int) -> np.ndarray:
    """Edge-extended copy of a grid-padded volume, for repeated halo cuts."""
    return np.pad(v_padded, w_h, mode="edge") if w_h else v_padded


def cut_halos(ext: np.ndarray, grid: PatchGrid, coords, w_h: int) -> np.ndarray:
    """Stack of halo-padded patches for ``coords`` from an array made by :func:`halo_source`."""
    n = grid.patch_size + 2 * w_h
    out = np.empty((len(coords), n, n, n), dtype=ext.dtype)
    for i, c in enumerate(coords):
        o = grid.origin(c)
        out[i] = ext[o[0] : o[0] + n, o[1] : o[1] + n, o[2] : o[2] + n]
    return out


def stitch(patches, grid: PatchGrid, spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Inverse of :func:`extract_patches`; patches must arrive in grid order."""
    return Volume(stitch_array(patches, grid), spacing=spacing)


def stitch_array(patches, grid: PatchGrid) -> np.ndarray:
    if len(patches) != grid.n_patches:
        raise ShapeError(f"expected {grid.n_patches} patches, got {len(patches)}")
    p = grid.patch_size
    out = None
    for i, patch in enumerate(patches):
        coord = grid.coord_of(i)
        if isinstance(patch, Patch):
            if tuple(patch.coord) != coord:
                raise ContractError(f"patch {i} has coord {patch.coord}, expected {coord} (grid order)")
            data = patch.data
        else:
            data = np.asarray(patch)
        if data.shape != (p, p, p):
            raise ShapeError(f"patch {i} has shape {data.shape}, expected {(p, p, p)}")
        if out is None:
            out = np.empty(grid.padded_dims, dtype=data.dtype)
        o = grid.origin(coord)
        out[o[0] : o[0] + p, o[1] : o[1] + p, o[2] : o[2] + p] = data
    return crop_to_source(out, grid)


def crop_to_source(padded: np.ndarray, grid: PatchGrid) -> np.ndarray:
    sl = tuple(slice(b, b + n) for b, n in zip(grid.pad_before, grid.source_dims))
    return np.ascontiguousarray(padded[sl])
