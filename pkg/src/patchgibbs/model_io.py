"""Prior files and 8-bit image files.

Prior file layout (little-endian throughout)::

    8 bytes   magic  b"PPRIOR01"
    u32       kind   0 = Gaussian mixture, 1 = dictionary
    u32       patch size p
    u32       channels C
    gmm:      u32 K, K f64 weights, K*d f64 means,
              K*d*(d+1)/2 f64 Cholesky factor entries (lower triangle, row-major)
    dict:     u32 N, N*d f64 atoms

with ``d = p * p * C``.
"""
from __future__ import annotations

import os
import struct

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from .errors import FormatError, InvalidArgument, NumericalFailure
from .image import as_image
from .priors import COV_FLOOR, DictionaryPrior, GmmPrior, PatchPrior

__all__ = [
    "MAGIC",
    "save_prior",
    "load_prior",
    "prior_to_bytes",
    "prior_from_bytes",
    "read_image",
    "write_image",
]

MAGIC = b"PPRIOR01"
KIND_GMM = 0
KIND_DICT = 1
_HEADER = struct.Struct("<8sIII")
_COUNT = struct.Struct("<I")
# formats accepted by the image readers and writers, keyed by file suffix
_IMAGE_FORMATS = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM", ".pnm": "PPM"}


def prior_to_bytes(prior: PatchPrior) -> bytes:
    """Serialize ``prior`` in the prior file layout."""
    p, c = prior.patch_size, prior.channels
    if isinstance(prior, GmmPrior):
        K, d = prior.n_components, prior.dim
        rows, cols = np.tril_indices(d)
        parts = [
            _HEADER.pack(MAGIC, KIND_GMM, p, c),
            _COUNT.pack(K),
            prior.weights.astype("<f8").tobytes(),
            prior.means.astype("<f8").tobytes(),
            prior.chol[:, rows, cols].astype("<f8").tobytes(),
        ]
    elif isinstance(prior, DictionaryPrior):
        parts = [
            _HEADER.pack(MAGIC, KIND_DICT, p, c),
            _COUNT.pack(prior.n_atoms),
            prior.atoms.astype("<f8").tobytes(),
        ]
    else:
        raise InvalidArgument(f"cannot serialize {type(prior).__name__}")
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"prior file truncated: needed {n} bytes for {what} at offset {self.pos}, "
                f"only {len(self.buf) - self.pos} left"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def floats(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)


def _apply_floor(chol: np.ndarray, floor: float) -> np.ndarray:
    """Add ``floor`` to the diagonal of any covariance whose smallest
    eigenvalue has fallen below it, and refactor. Components that already
    respect the floor (up to rounding) keep their stored factor untouched."""
    out = chol.copy()
    d = chol.shape[1]
    for k, L in enumerate(chol):
        cov = L @ L.T
        if np.linalg.eigvalsh(cov)[0] >= floor * (1.0 - 1e-3):
            continue
        try:
            out[k] = np.linalg.cholesky(cov + floor * np.eye(d))
        except np.linalg.LinAlgError:
            raise NumericalFailure(f"component {k}: covariance is not positive definite") from None
    return out


def prior_from_bytes(buf: bytes, floor: float = COV_FLOOR) -> PatchPrior:
    """Parse a prior file image; see the module docstring for the layout."""
    r = _Reader(bytes(buf))
    magic, kind, p, c = _HEADER.unpack(r.take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if p < 1 or c < 1:
        raise FormatError(f"invalid patch geometry p={p}, C={c}")
    d = p * p * c
    (count,) = _COUNT.unpack(r.take(_COUNT.size, "component count"))
    if count < 1:
        raise FormatError("prior file holds no components")
    if kind == KIND_GMM:
        weights = r.floats(count, "weights")
        means = r.floats(count * d, "means").reshape(count, d)
        tri = r.floats(count * d * (d + 1) // 2, "covariance factors").reshape(count, -1)
        chol = np.zeros((count, d, d))
        rows, cols = np.tril_indices(d)
        chol[:, rows, cols] = tri
        for k in range(count):
            diag = np.diagonal(chol[k])
            if not (np.all(np.isfinite(chol[k])) and np.all(diag > 0)):
                raise NumericalFailure(f"component {k}: covariance factor is not positive definite")
        prior = GmmPrior(weights, means, _apply_floor(chol, floor), p, c)
    elif kind == KIND_DICT:
        atoms = r.floats(count * d, "atoms").reshape(count, d)
        prior = DictionaryPrior(atoms, p, c)
    else:
        raise FormatError(f"unknown prior kind {kind}")
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after the prior payload")
    return prior


def save_prior(prior: PatchPrior, path) -> None:
    """Write ``prior`` to ``path``. I/O failures raise ``OSError``."""
    data = prior_to_bytes(prior)
    with open(path, "wb") as fh:
        fh.write(data)


def load_prior(path, floor: float = COV_FLOOR) -> PatchPrior:
    """Read a prior written by :func:`save_prior`.

    :raises FormatError: bad magic, unknown kind, truncated or oversized file
    :raises NumericalFailure: a covariance factor that is not positive definite
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    return prior_from_bytes(buf, floor)


def _format_for(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    fmt = _IMAGE_FORMATS.get(ext)
    if fmt is None:
        raise FormatError(f"{path}: unsupported image format {ext or '(none)'!r}; use PNG, PGM or PPM")
    return fmt


def read_image(path) -> np.ndarray:
    """Read an 8-bit gray or RGB PNG/PGM/PPM as a float ``(H, W, C)`` image in [0, 1]."""
    _format_for(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("1", "LA"):
                im, mode = im.convert("L"), "L"
            elif mode in ("P", "RGBA"):
                im, mode = im.convert("RGB"), "RGB"
            arr = np.asarray(im)
    except UnidentifiedImageError:
        raise FormatError(f"{path}: not a readable image") from None
    except (SyntaxError, ValueError) as exc:
        raise FormatError(f"{path}: corrupt image ({exc})") from None
    if mode not in ("L", "RGB") or arr.dtype != np.uint8:
        raise FormatError(f"{path}: unsupported pixel mode {mode!r} (8-bit gray or RGB only)")
    return as_image(arr.astype(np.float64) / 255.0)


def write_image(img, path) -> None:
    """Write a 1- or 3-channel image, quantized as ``round(255 * clip(v, 0, 1))``."""
    fmt = _format_for(path)
    arr = as_image(img)
    c = arr.shape[2]
    if c not in (1, 3):
        raise InvalidArgument(f"can only write 1- or 3-channel images, got {c}")
    q = np.rint(255.0 * np.clip(arr, 0.0, 1.0)).astype(np.uint8)
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ppm" and c == 1:
        q = np.repeat(q, 3, axis=2)
    elif ext == ".pgm" and c == 3:
        raise FormatError(f"{path}: PGM holds gray images only")
    pil = PILImage.fromarray(q[:, :, 0] if q.shape[2] == 1 else q)
    pil.save(path, format=fmt)
