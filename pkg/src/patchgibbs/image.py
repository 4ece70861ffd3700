"""Image arrays, patch grids and PSNR.

Images are float64 arrays of shape ``(height, width, channels)``. A grid is a
set of non-overlapping ``p x p`` patches whose top-left corners sit at
``(offset_y + i*p, offset_x + j*p)``; the grid covers as many whole patches
as fit inside the image and leaves the remaining border strips uncovered.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import InvalidArgument

__all__ = [
    "GridSpec",
    "GridSet",
    "as_image",
    "pad_reflect",
    "crop",
    "grid_layout",
    "extract_grid_patches",
    "assemble_grid_patches",
    "make_grids",
    "psnr",
]


def as_image(img) -> np.ndarray:
    """Return ``img`` as a finite float64 ``(H, W, C)`` array.

    2-D input is treated as a single-channel image.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] < 1:
        raise InvalidArgument(f"expected an (H, W[, C]) image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument("image contains non-finite values")
    return arr


@dataclass(frozen=True)
class GridSpec:
    patch_size: int
    offset_y: int = 0
    offset_x: int = 0

    def __post_init__(self):
        p = self.patch_size
        if p < 1:
            raise InvalidArgument(f"patch_size must be positive, got {p}")
        if not (0 <= self.offset_y < p and 0 <= self.offset_x < p):
            raise InvalidArgument(
                f"offsets must lie in [0, {p}), got ({self.offset_y}, {self.offset_x})"
            )

    @property
    def offset(self) -> tuple[int, int]:
        return (self.offset_y, self.offset_x)


@dataclass(frozen=True)
class GridSet:
    """Ordered collection of grids sharing one patch size."""

    grids: tuple[GridSpec, ...]

    def __post_init__(self):
        grids = tuple(self.grids)
        object.__setattr__(self, "grids", grids)
        if not grids:
            raise InvalidArgument("a grid set needs at least one grid")
        sizes = {g.patch_size for g in grids}
        if len(sizes) != 1:
            raise InvalidArgument(f"grids disagree on patch size: {sorted(sizes)}")
        offsets = [g.offset for g in grids]
        if len(set(offsets)) != len(offsets):
            raise InvalidArgument("grid offsets must be pairwise distinct")
        if offsets[0] != (0, 0):
            raise InvalidArgument("the first grid must have offset (0, 0)")

    @property
    def patch_size(self) -> int:
        return self.grids[0].patch_size

    @property
    def count(self) -> int:
        return len(self.grids)

    def __len__(self) -> int:
        return len(self.grids)

    def __iter__(self) -> Iterator[GridSpec]:
        return iter(self.grids)

    def __getitem__(self, i) -> GridSpec:
        return self.grids[i]


def pad_reflect(img, margin: int) -> np.ndarray:
    """Pad every side by ``margin`` pixels, mirroring about the edge pixel.

    The edge pixel itself is not repeated (``[a, b]`` padded by one gives
    ``[b, a, b, a]``).
    """
    arr = np.asarray(img, dtype=np.float64)
    if margin < 0:
        raise InvalidArgument(f"margin must be non-negative, got {margin}")
    if margin == 0:
        return arr.copy()
    h, w = arr.shape[:2]
    if margin >= min(h, w):
        raise InvalidArgument(f"margin {margin} too large for a {h}x{w} image")
    widths = [(margin, margin), (margin, margin)] + [(0, 0)] * (arr.ndim - 2)
    return np.pad(arr, widths, mode="reflect")


def crop(img: np.ndarray, margin: int) -> np.ndarray:
    """Remove ``margin`` pixels from every side (inverse of :func:`pad_reflect`)."""
    if margin == 0:
        return img
    return img[margin:-margin, margin:-margin]


def grid_layout(grid: GridSpec, shape: Sequence[int]) -> tuple[int, int]:
    """Number of patch rows and columns ``grid`` places inside ``shape``."""
    p = grid.patch_size
    h, w = shape[0], shape[1]
    ny = (h - grid.offset_y) // p
    nx = (w - grid.offset_x) // p
    if ny < 1 or nx < 1:
        raise InvalidArgument(
            f"grid with patch {p} and offset {grid.offset} does not fit a {h}x{w} image"
        )
    return ny, nx


def extract_grid_patches(img, grid: GridSpec) -> np.ndarray:
    """Vectorize the patches of ``grid`` into the rows of an ``(n, p*p*C)`` array.

    Patches are ordered row-major by block position; each row is the
    row-major flattening of a ``(p, p, C)`` block.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3:
        raise InvalidArgument(f"expected an (H, W, C) image, got shape {arr.shape}")
    p = grid.patch_size
    ny, nx = grid_layout(grid, arr.shape)
    oy, ox = grid.offset
    c = arr.shape[2]
    region = arr[oy:oy + ny * p, ox:ox + nx * p]
    blocks = region.reshape(ny, p, nx, p, c).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(ny * nx, p * p * c)


def assemble_grid_patches(patches, grid: GridSpec, shape: Sequence[int], fill=None) -> np.ndarray:
    """Write patch vectors back into an image of ``shape``.

    Pixels the grid does not cover are taken from ``fill`` (zeros if omitted).
    """
    patches = np.asarray(patches, dtype=np.float64)
    if len(shape) != 3:
        raise InvalidArgument(f"shape must be (H, W, C), got {tuple(shape)}")
    h, w, c = shape
    p = grid.patch_size
    ny, nx = grid_layout(grid, shape)
    if patches.shape != (ny * nx, p * p * c):
        raise InvalidArgument(
            f"expected {ny * nx} patches of length {p * p * c}, got array of shape {patches.shape}"
        )
    if fill is None:
        out = np.zeros((h, w, c))
    else:
        out = np.array(fill, dtype=np.float64, copy=True)
        if out.shape != (h, w, c):
            raise InvalidArgument(f"fill has shape {out.shape}, expected {(h, w, c)}")
    oy, ox = grid.offset
    blocks = patches.reshape(ny, nx, p, p, c).transpose(0, 2, 1, 3, 4)
    out[oy:oy + ny * p, ox:ox + nx * p] = blocks.reshape(ny * p, nx * p, c)
    return out


def make_grids(patch_size: int, count: int, seed: int = 0) -> GridSet:
    """Pick ``count`` distinct grid offsets; ``(0, 0)`` always comes first.

    The remaining offsets are a seeded shuffle of all other shifts in
    ``{0..p-1}^2``, truncated to ``count - 1``.
    """
    p = int(patch_size)
    if p < 1:
        raise InvalidArgument(f"patch_size must be positive, got {p}")
    if not 1 <= count <= p * p:
        raise InvalidArgument(f"grid count must lie in [1, {p * p}], got {count}")
    others = [(oy, ox) for oy in range(p) for ox in range(p) if (oy, ox) != (0, 0)]
    order = np.random.default_rng(seed).permutation(len(others))
    chosen = [(0, 0)] + [others[i] for i in order[: count - 1]]
    return GridSet(tuple(GridSpec(p, oy, ox) for oy, ox in chosen))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the images are equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise InvalidArgument(f"peak must be positive, got {peak}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(peak**2 / mse))
