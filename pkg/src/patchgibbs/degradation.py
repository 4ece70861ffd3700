"""Linear degradation operators and the Gaussian data-step sampler.

Operators act on ``(H, W, C)`` images. Convolution uses periodic boundaries,
so ``H^T H`` is diagonal in the Fourier basis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator as _ScipyOperator
from scipy.sparse.linalg import cg

from .errors import FormatError, InvalidArgument, NumericalFailure
from .image import pad_reflect

__all__ = [
    "LinearOperator",
    "Identity",
    "Convolution",
    "Mask",
    "GaussianKernelSpec",
    "build_gaussian_kernel",
    "load_kernel",
    "apply",
    "apply_adjoint",
    "data_perturbation",
    "sample_data_gaussian",
]


class LinearOperator:
    """Degradation ``H``; subclasses implement :meth:`apply` and :meth:`adjoint`."""

    kind = "abstract"
    spectral = False

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def adjoint(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def padded(self, margin: int) -> "LinearOperator":
        """The same operator acting on images reflect-padded by ``margin``."""
        return self

    def gram(self, x: np.ndarray) -> np.ndarray:
        return self.adjoint(self.apply(x))


class Identity(LinearOperator):
    kind = "identity"
    spectral = True

    def apply(self, x):
        return np.array(x, dtype=np.float64, copy=True)

    adjoint = apply

    def transfer(self, shape):
        return np.ones((shape[0], shape[1]), dtype=complex)

    def __repr__(self):
        return "Identity()"


class Convolution(LinearOperator):
    """Periodic convolution of every channel with a centered 2-D kernel.

    The kernel's center is element ``(kh // 2, kw // 2)``.
    """

    kind = "convolution"
    spectral = True

    def __init__(self, kernel):
        kernel = np.array(kernel, dtype=np.float64)
        if kernel.ndim != 2 or kernel.size == 0:
            raise InvalidArgument(f"kernel must be a non-empty 2-D array, got shape {kernel.shape}")
        if not np.all(np.isfinite(kernel)):
            raise InvalidArgument("kernel must be finite")
        kernel.setflags(write=False)
        self.kernel = kernel
        self._transfer = {}

    def transfer(self, shape) -> np.ndarray:
        """2-D DFT of the kernel embedded in an ``shape[:2]`` periodic domain."""
        key = (int(shape[0]), int(shape[1]))
        T = self._transfer.get(key)
        if T is None:
            h, w = key
            kh, kw = self.kernel.shape
            rows = (np.arange(kh) - kh // 2) % h
            cols = (np.arange(kw) - kw // 2) % w
            embedded = np.zeros(key)
            np.add.at(embedded, (rows[:, None], cols[None, :]), self.kernel)
            T = np.fft.fft2(embedded)
            T.setflags(write=False)
            self._transfer[key] = T
        return T

    def _filter(self, x, T):
        X = np.fft.fft2(x, axes=(0, 1))
        return np.real(np.fft.ifft2(X * T[:, :, None], axes=(0, 1)))

    def apply(self, x):
        return self._filter(x, self.transfer(x.shape))

    def adjoint(self, x):
        return self._filter(x, np.conj(self.transfer(x.shape)))

    def __repr__(self):
        return f"Convolution(kernel shape {self.kernel.shape})"


class Mask(LinearOperator):
    """Pixel selection; ``mask`` is 1 for observed pixels, 0 for missing ones."""

    kind = "mask"

    def __init__(self, mask):
        mask = np.array(mask, dtype=np.float64)
        if mask.ndim == 2:
            mask = mask[:, :, None]
        if mask.ndim != 3 or not np.all((mask == 0) | (mask == 1)):
            raise InvalidArgument("mask must be a {0,1}-valued (H, W[, C]) array")
        mask.setflags(write=False)
        self.mask = mask

    def _check(self, x):
        if x.shape[:2] != self.mask.shape[:2] or self.mask.shape[2] not in (1, x.shape[2]):
            raise InvalidArgument(f"mask of shape {self.mask.shape} does not fit image {x.shape}")

    def apply(self, x):
        self._check(x)
        return x * self.mask

    adjoint = apply

    def padded(self, margin):
        return Mask(pad_reflect(self.mask, margin))

    def __repr__(self):
        return f"Mask({int(self.mask.sum())} of {self.mask.size} observed)"


def _check_image(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise InvalidArgument(f"expected an (H, W, C) image, got shape {x.shape}")
    return x


def apply(op: LinearOperator, x) -> np.ndarray:
    return op.apply(_check_image(x))


def apply_adjoint(op: LinearOperator, x) -> np.ndarray:
    return op.adjoint(_check_image(x))


# -- kernels ------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianKernelSpec:
    sigma_x: float
    sigma_y: float
    rho: float = 0.0
    radius: int | None = None

    @classmethod
    def isotropic(cls, scale: float) -> "GaussianKernelSpec":
        return cls(scale, scale, 0.0)


def build_gaussian_kernel(spec: GaussianKernelSpec) -> np.ndarray:
    """Sampled bivariate normal density, truncated and normalized to sum 1.

    Rows index the vertical coordinate, columns the horizontal one; the
    default radius is ``ceil(4 * max(sigma_x, sigma_y))``.
    """
    sx, sy, rho = float(spec.sigma_x), float(spec.sigma_y), float(spec.rho)
    if sx <= 0 or sy <= 0:
        raise InvalidArgument("kernel standard deviations must be positive")
    if abs(rho) >= 1:
        raise InvalidArgument(f"correlation must lie in (-1, 1), got {rho}")
    r = spec.radius if spec.radius is not None else math.ceil(4 * max(sx, sy))
    v, u = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    cov = np.array([[sx * sx, rho * sx * sy], [rho * sx * sy, sy * sy]])
    prec = np.linalg.inv(cov)
    quad = prec[0, 0] * u * u + 2 * prec[0, 1] * u * v + prec[1, 1] * v * v
    k = np.exp(-0.5 * quad)
    return k / k.sum()


def load_kernel(path) -> np.ndarray:
    """Read a kernel from a text file of whitespace-separated rows."""
    try:
        k = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: not a numeric kernel matrix ({exc})") from None
    return k


# -- Gaussian data step -------------------------------------------------------------


def _system(op, y, noise_var, n_grids, beta, xbar, gamma, t):
    if beta < 0 or gamma < 0 or noise_var <= 0 or n_grids < 1:
        raise InvalidArgument("need beta >= 0, gamma >= 0, noise_var > 0 and n_grids >= 1")
    if beta + gamma == 0 and isinstance(op, Mask):
        raise InvalidArgument("beta + gamma must be positive for a masking operator")
    y = _check_image(y)
    xbar = np.broadcast_to(np.asarray(xbar, dtype=np.float64), y.shape)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), y.shape)
    data_w = 1.0 / (n_grids * noise_var)
    ridge = 2.0 * beta + 2.0 * gamma
    rhs = 2.0 * beta * xbar + 2.0 * gamma * t + data_w * op.adjoint(y)
    return y.shape, ridge, data_w, rhs


def data_perturbation(op, shape, noise_var, n_grids, beta, gamma, rng) -> np.ndarray:
    """Noise field whose covariance is the data-step precision matrix."""
    n1 = rng.standard_normal(shape)
    n2 = rng.standard_normal(shape)
    n3 = rng.standard_normal(shape)
    return (
        math.sqrt(2.0 * beta) * n1
        + math.sqrt(2.0 * gamma) * n2
        + op.adjoint(n3) / math.sqrt(n_grids * noise_var)
    )


def _spectral_eigs(op, shape, ridge, data_w):
    T = op.transfer(shape)
    return ridge + data_w * (T.real**2 + T.imag**2)


def _spectral_solve(eigs, b):
    return np.real(np.fft.ifft2(np.fft.fft2(b, axes=(0, 1)) / eigs[:, :, None], axes=(0, 1)))


def _iterative_solve(op, shape, ridge, data_w, b, x0, tol, maxiter):
    n = int(np.prod(shape))

    def matvec(v):
        img = v.reshape(shape)
        return (ridge * img + data_w * op.gram(img)).ravel()

    A = _ScipyOperator((n, n), matvec=matvec, dtype=np.float64)
    sol, _ = cg(A, b.ravel(), x0=None if x0 is None else x0.ravel(), rtol=tol, atol=0.0, maxiter=maxiter)
    bnorm = np.linalg.norm(b)
    res = np.linalg.norm(matvec(sol) - b.ravel()) / (bnorm if bnorm > 0 else 1.0)
    if not np.isfinite(res) or res > tol * 1.01:
        raise NumericalFailure(f"conjugate gradients stalled at relative residual {res:.3e} after {maxiter} iterations")
    return sol.reshape(shape)


def sample_data_gaussian(
    op: LinearOperator,
    y,
    noise_var: float,
    n_grids: int,
    beta: float,
    xbar,
    gamma: float,
    t,
    rng: np.random.Generator | None,
    backend: str = "auto",
    perturbation=None,
    tol: float = 1e-8,
    maxiter: int = 1000,
) -> np.ndarray:
    """Draw from ``exp(-beta|x - xbar|^2 - gamma|x - t|^2 - |Hx - y|^2 / (2 G noise_var))``.

    The precision is ``P = 2(beta + gamma) I + H^T H / (G noise_var)``. With
    ``rng=None`` and no ``perturbation`` the mean is returned.

    ``backend="spectral"`` diagonalizes ``P`` with the FFT (identity and
    periodic convolution only) and whitens white noise per frequency.
    ``backend="iterative"`` solves ``P x = b + xi`` by conjugate gradients,
    where ``xi`` has covariance ``P`` (see :func:`data_perturbation`).
    A given ``perturbation`` is added to the right-hand side by either backend.
    """
    shape, ridge, data_w, rhs = _system(op, y, noise_var, n_grids, beta, xbar, gamma, t)
    if backend == "auto":
        backend = "spectral" if op.spectral else "iterative"
    if backend == "spectral":
        if not op.spectral:
            raise InvalidArgument(f"the spectral backend does not support {op.kind} operators")
        eigs = _spectral_eigs(op, shape, ridge, data_w)
        if perturbation is not None:
            return _spectral_solve(eigs, rhs + perturbation)
        mean = _spectral_solve(eigs, rhs)
        if rng is None:
            return mean
        z = rng.standard_normal(shape)
        return mean + np.real(np.fft.ifft2(np.fft.fft2(z, axes=(0, 1)) / np.sqrt(eigs)[:, :, None], axes=(0, 1)))
    if backend != "iterative":
        raise InvalidArgument(f"unknown backend {backend!r}")
    if perturbation is None and rng is not None:
        perturbation = data_perturbation(op, shape, noise_var, n_grids, beta, gamma, rng)
    b = rhs if perturbation is None else rhs + perturbation
    x0 = (b / max(ridge, 1e-300)) if ridge > 0 else None
    return _iterative_solve(op, shape, ridge, data_w, b, x0, tol, maxiter)
