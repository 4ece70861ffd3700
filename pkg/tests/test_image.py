import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchgibbs.errors import InvalidArgument
from patchgibbs.image import (
    GridSet,
    GridSpec,
    as_image,
    assemble_grid_patches,
    crop,
    extract_grid_patches,
    grid_layout,
    make_grids,
    pad_reflect,
    psnr,
)


def test_as_image_promotes_gray():
    assert as_image(np.zeros((3, 4))).shape == (3, 4, 1)


def test_as_image_rejects_nonfinite():
    with pytest.raises(InvalidArgument):
        as_image(np.array([[0.0, np.nan]]))


def test_gridspec_validates_offsets():
    with pytest.raises(InvalidArgument):
        GridSpec(8, 8, 0)
    with pytest.raises(InvalidArgument):
        GridSpec(0)


def test_gridset_rules():
    with pytest.raises(InvalidArgument):
        GridSet((GridSpec(8, 1, 1),))
    with pytest.raises(InvalidArgument):
        GridSet((GridSpec(8), GridSpec(8)))
    with pytest.raises(InvalidArgument):
        GridSet((GridSpec(8), GridSpec(4, 1, 1)))
    gs = GridSet((GridSpec(4), GridSpec(4, 2, 2)))
    assert gs.count == 2 and gs.patch_size == 4


# -- pad_reflect ---------------------------------------------------------------------


def test_pad_zero_margin_is_identity():
    img = np.random.default_rng(0).random((5, 6, 2))
    assert np.array_equal(pad_reflect(img, 0), img)


def test_pad_reflects_without_repeating_edge():
    row = np.array([[1.0, 2.0, 3.0]])[:, :, None]
    out = pad_reflect(np.repeat(row, 3, axis=0), 1)
    assert np.array_equal(out[1, :, 0], [2.0, 1.0, 2.0, 3.0, 2.0])


def test_pad_margin_too_large():
    # a 1x2 image cannot be reflected by one pixel vertically
    with pytest.raises(InvalidArgument):
        pad_reflect(np.array([[0.2, 0.7]]), 1)
    with pytest.raises(InvalidArgument):
        pad_reflect(np.zeros((4, 4)), -1)


def test_pad_crop_round_trip_16():
    img = np.random.default_rng(1).random((16, 16, 1))
    out = pad_reflect(img, 8)
    assert out.shape == (32, 32, 1)
    assert np.array_equal(crop(out, 8), img)


@given(
    h=st.integers(2, 20),
    w=st.integers(2, 20),
    c=st.integers(1, 3),
    m=st.integers(0, 19),
    seed=st.integers(0, 2**16),
)
@settings(max_examples=60, deadline=None)
def test_pad_crop_round_trip_property(h, w, c, m, seed):
    img = np.random.default_rng(seed).random((h, w, c))
    if m >= min(h, w):
        with pytest.raises(InvalidArgument):
            pad_reflect(img, m)
        return
    assert np.array_equal(crop(pad_reflect(img, m), m), img)


# -- extraction and assembly ---------------------------------------------------------


def test_single_patch_is_whole_image():
    img = np.arange(64.0).reshape(8, 8, 1)
    P = extract_grid_patches(img, GridSpec(8))
    assert P.shape == (1, 64)
    assert np.array_equal(P[0], img.ravel())


def test_four_patches_round_trip():
    img = np.random.default_rng(2).random((16, 16, 1))
    g = GridSpec(8)
    P = extract_grid_patches(img, g)
    assert P.shape == (4, 64)
    assert np.array_equal(assemble_grid_patches(P, g, img.shape), img)


def test_offset_grid_counts_on_padded_image():
    img = pad_reflect(np.random.default_rng(3).random((24, 24, 1)), 8)
    g = GridSpec(8, 4, 4)
    P = extract_grid_patches(img, g)
    # offset 4 in a 40-pixel side leaves room for 4 whole patches per axis
    assert P.shape[0] == 16
    assert P.size == 32 * 32


def test_patch_layout_row_major_blocks():
    img = np.arange(4 * 6 * 2, dtype=float).reshape(4, 6, 2)
    P = extract_grid_patches(img, GridSpec(2))
    assert P.shape == (6, 8)
    assert np.array_equal(P[4], img[2:4, 2:4].ravel())


def test_all_zero_patches_give_zero_image():
    g = GridSpec(4)
    out = assemble_grid_patches(np.zeros((4, 16)), g, (8, 8, 1))
    assert np.array_equal(out, np.zeros((8, 8, 1)))


def test_permuted_patches_permute_blocks():
    img = np.random.default_rng(4).random((8, 8, 3))
    g = GridSpec(4)
    P = extract_grid_patches(img, g)
    perm = [3, 0, 2, 1]
    out = assemble_grid_patches(P[perm], g, img.shape)
    blocks = [(0, 0), (0, 4), (4, 0), (4, 4)]
    for dst, src in enumerate(perm):
        (a, b), (c, d) = blocks[dst], blocks[src]
        assert np.array_equal(out[a:a + 4, b:b + 4], img[c:c + 4, d:d + 4])


def test_assemble_checks_counts():
    with pytest.raises(InvalidArgument):
        assemble_grid_patches(np.zeros((3, 16)), GridSpec(4), (8, 8, 1))


def test_assemble_fill_covers_uncovered_strip():
    img = np.random.default_rng(5).random((10, 10, 1))
    g = GridSpec(4, 1, 1)
    P = extract_grid_patches(img, g)
    out = assemble_grid_patches(P, g, img.shape, fill=img)
    assert np.array_equal(out, img)


def test_grid_too_large_for_image():
    with pytest.raises(InvalidArgument):
        grid_layout(GridSpec(8, 4, 4), (8, 8, 1))


@given(
    p=st.integers(1, 6),
    ny=st.integers(1, 4),
    nx=st.integers(1, 4),
    c=st.integers(1, 3),
    data=st.data(),
)
@settings(max_examples=80, deadline=None)
def test_partition_and_round_trip(p, ny, nx, c, data):
    oy = data.draw(st.integers(0, p - 1))
    ox = data.draw(st.integers(0, p - 1))
    shape = (oy + ny * p, ox + nx * p, c)
    g = GridSpec(p, oy, ox)
    # every pixel the grid reaches is covered exactly once
    cover = assemble_grid_patches(np.ones((ny * nx, p * p * c)), g, shape)
    assert cover[oy:, ox:].min() == 1.0 and cover.sum() == ny * nx * p * p * c
    img = np.random.default_rng(data.draw(st.integers(0, 1000))).random(shape)
    out = assemble_grid_patches(extract_grid_patches(img, g), g, shape, fill=img)
    assert np.array_equal(out, img)


# -- grids and PSNR ------------------------------------------------------------------


def test_make_grids_single():
    assert [g.offset for g in make_grids(8, 1)] == [(0, 0)]


def test_make_grids_exhaustive():
    gs = make_grids(8, 64, seed=3)
    assert sorted(g.offset for g in gs) == [(a, b) for a in range(8) for b in range(8)]
    assert gs[0].offset == (0, 0)


def test_make_grids_deterministic():
    a = make_grids(8, 32, seed=7)
    b = make_grids(8, 32, seed=7)
    assert a == b
    assert len({g.offset for g in a}) == 32


def test_make_grids_bounds():
    with pytest.raises(InvalidArgument):
        make_grids(8, 65)
    with pytest.raises(InvalidArgument):
        make_grids(8, 0)


def test_psnr_cases():
    a = np.random.default_rng(6).random((5, 5, 1))
    assert psnr(a, a) == float("inf")
    assert psnr(np.zeros((3, 3)), np.full((3, 3), 2.0), peak=2.0) == pytest.approx(0.0, abs=1e-12)
    b = np.random.default_rng(7).random((5, 5, 1))
    mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert abs(psnr(a, b) - 10 * np.log10(1 / mse)) < 1e-9
    assert psnr(a, b) == psnr(b, a)


def test_psnr_errors():
    with pytest.raises(InvalidArgument):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(InvalidArgument):
        psnr(np.zeros((2, 2)), np.ones((2, 2)), peak=0)
