import itertools

import numpy as np
import pytest

from diffiqt.errors import ContractError, ShapeError
from diffiqt.patching import (
    Patch,
    cut_halos,
    extract_patches,
    gather_halo,
    halo_source,
    make_grid,
    make_groups,
    pad_to_grid,
    stitch,
)
from diffiqt.volume import Volume


def test_exact_tiling(rng):
    grid, patches = extract_patches(rng.standard_normal((64, 64, 64)).astype(np.float32), 32)
    assert grid.grid_dims == (2, 2, 2)
    assert len(patches) == 8
    assert grid.pad_before == grid.pad_after == (0, 0, 0)


def test_padded_tiling(rng):
    data = rng.standard_normal((48, 48, 48)).astype(np.float32)
    grid, patches = extract_patches(data, 32)
    assert grid.grid_dims == (2, 2, 2)
    assert tuple(b + a for b, a in zip(grid.pad_before, grid.pad_after)) == (16, 16, 16)
    # reflect padding mirrors around the first voxel without repeating it
    padded = pad_to_grid(data, grid)
    b = grid.pad_before[0]
    np.testing.assert_array_equal(padded[b - 1, b:-b, b:-b], data[1])


def test_voxel_index_oracle(rng):
    data = rng.standard_normal((40, 35, 50)).astype(np.float32)
    p = 16
    grid, patches = extract_patches(data, p)
    for _ in range(200):
        i, j, k = (int(rng.integers(n)) for n in data.shape)
        ii, jj, kk = i + grid.pad_before[0], j + grid.pad_before[1], k + grid.pad_before[2]
        coord = (ii // p, jj // p, kk // p)
        patch = patches[grid.index_of(coord)]
        assert patch.coord == coord
        assert patch.data[ii % p, jj % p, kk % p] == data[i, j, k]


def test_patch_size_errors():
    with pytest.raises(ShapeError):
        extract_patches(np.zeros((16, 16, 16)), 4)
    with pytest.raises(ShapeError):
        make_grid((8, 8, 8), 0)


def _check_partition(grid, groups):
    real = [c for g in groups for c, d in zip(g.coords, g.duplicate) if not d]
    assert sorted(real) == sorted(itertools.product(*[range(n) for n in grid.grid_dims]))
    assert len(real) == len(set(real))


def _check_adjacent(group):
    origin = np.array(group.origin)
    offsets = [np.array(c) - origin for c, d in zip(group.coords, group.duplicate) if not d]
    assert all(((o >= 0) & (o <= 1)).all() for o in offsets)


def test_groups_single_block():
    grid = make_grid((64, 64, 64), 32)
    groups = make_groups(grid)
    assert len(groups) == 1 and len(groups[0]) == 8
    assert not any(groups[0].duplicate)
    _check_partition(grid, groups)


def test_groups_two_blocks():
    grid = make_grid((128, 64, 64), 32)
    groups = make_groups(grid)
    assert len(groups) == 2
    _check_partition(grid, groups)
    for g in groups:
        _check_adjacent(g)


def test_groups_odd_extent_duplicates_last_slab():
    grid = make_grid((96, 64, 64), 32)
    assert grid.grid_dims == (3, 2, 2)
    groups = make_groups(grid)
    assert len(groups) == 2
    _check_partition(grid, groups)
    second = groups[1]
    assert second.origin == (2, 0, 0)
    for c, d, off in zip(second.coords, second.duplicate, itertools.product(range(2), repeat=3)):
        # the virtual slab at x=3 copies the real slab at x=2
        assert d == (off[0] == 1)
        assert c[0] == 2
    assert sum(sum(g.duplicate) for g in groups) == 4


def test_groups_deterministic_and_partition_random_grids(rng):
    for _ in range(10):
        dims = tuple(int(n) for n in rng.integers(16, 90, 3))
        grid = make_grid(dims, 16)
        a, b = make_groups(grid), make_groups(grid)
        assert a == b
        _check_partition(grid, a)


def test_halo_faces_match_neighbors(rng):
    data = rng.standard_normal((48, 48, 48)).astype(np.float32)
    grid = make_grid(data.shape, 16)
    w = 3
    padded = pad_to_grid(data, grid)
    coord = (1, 1, 1)
    halo = gather_halo(padded, grid, coord, w)
    _, patches = extract_patches(data, 16)
    np.testing.assert_array_equal(halo.interior, patches[grid.index_of(coord)].data)
    for axis, side in itertools.product(range(3), (-1, 1)):
        nb = list(coord)
        nb[axis] += side
        neighbor = patches[grid.index_of(nb)].data
        idx = [slice(None)] * 3
        idx[axis] = slice(16 - w, 16) if side < 0 else slice(0, w)
        np.testing.assert_array_equal(halo.face(axis, side), neighbor[tuple(idx)])


def test_corner_halo_replicates_edges(rng):
    data = rng.standard_normal((32, 32, 32))
    grid = make_grid(data.shape, 16)
    halo = gather_halo(pad_to_grid(data, grid), grid, 0, 2)
    np.testing.assert_array_equal(halo.face(0, -1)[0], data[0, :16, :16])
    np.testing.assert_array_equal(halo.face(0, -1)[1], data[0, :16, :16])
    assert halo.padded[0, 0, 0] == data[0, 0, 0]


def test_halo_direct_slice_oracle(rng):
    data = rng.standard_normal((64, 48, 64))
    grid = make_grid(data.shape, 16)
    padded = pad_to_grid(data, grid)
    for _ in range(5):
        coord = tuple(int(rng.integers(1, g - 1)) for g in grid.grid_dims)
        o = grid.origin(coord)
        expected = padded[o[0] - 2 : o[0] + 18, o[1] - 2 : o[1] + 18, o[2] - 2 : o[2] + 18]
        np.testing.assert_array_equal(gather_halo(padded, grid, coord, 2).padded, expected)
        ext = halo_source(padded, 2)
        np.testing.assert_array_equal(cut_halos(ext, grid, [coord], 2)[0], expected)


def test_halo_shape_contract():
    grid = make_grid((32, 32, 32), 16)
    with pytest.raises(ShapeError):
        gather_halo(np.zeros((30, 32, 32)), grid, 0, 1)


def test_stitch_round_trip_random_shapes(rng):
    for _ in range(20):
        dims = tuple(int(n) for n in rng.integers(8, 70, 3))
        p = int(rng.choice([8, 16, 32]))
        if p > max(dims):
            p = 8
        v = Volume(rng.standard_normal(dims).astype(np.float32), spacing=(0.7, 0.8, 0.9))
        grid, patches = extract_patches(v, p)
        back = stitch(patches, grid, spacing=v.spacing)
        assert back.data.tobytes() == v.data.tobytes()


@pytest.mark.parametrize("dims,p", [((48, 48, 48), 32), ((64, 64, 64), 32)])
def test_stitch_round_trip_examples(dims, p, rng):
    data = rng.standard_normal(dims).astype(np.float32)
    grid, patches = extract_patches(data, p)
    assert stitch(patches, grid).data.tobytes() == data.tobytes()


def test_stitch_contracts(rng):
    grid, patches = extract_patches(rng.standard_normal((32, 32, 32)).astype(np.float32), 16)
    swapped = list(patches)
    swapped[0], swapped[1] = swapped[1], swapped[0]
    with pytest.raises(ContractError):
        stitch(swapped, grid)
    with pytest.raises(ShapeError):
        stitch(patches[:-1], grid)
    with pytest.raises(ShapeError):
        stitch([Patch(pt.coord, pt.data[:8]) for pt in patches], grid)
