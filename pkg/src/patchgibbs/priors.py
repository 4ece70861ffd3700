"""Patch priors: a full-covariance Gaussian mixture and a uniform dictionary.

All prior methods are batched: patches are the rows of an ``(n, d)`` array
with ``d = patch_size**2 * channels``. Observation noise is passed as

* a positive float: spherical variance ``sigma**2`` shared by every element;
* an array broadcastable to ``(n, d)``: per-element variances (a diagonal
  covariance). ``inf`` marks an unobserved element, which then contributes
  nothing to the likelihood.
"""
from __future__ import annotations

import logging
import warnings
from abc import ABC, abstractmethod

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .errors import InvalidArgument, NumericalFailure

__all__ = [
    "COV_FLOOR",
    "DICT_TOL",
    "PatchPrior",
    "GmmPrior",
    "DictionaryPrior",
    "gmm_responsibilities",
    "gmm_posterior_moments",
    "sample_patch_posterior",
    "map_patch_posterior",
    "log_density",
    "sample_prior",
    "train_gmm_em",
]

log = logging.getLogger(__name__)

COV_FLOOR = 1e-6
DICT_TOL = 1e-6
_LOG_2PI = np.log(2.0 * np.pi)


def _as_batch(x, dim: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise InvalidArgument(f"expected patch vectors of length {dim}, got shape {np.shape(x)}")
    return arr, single


def _parse_noise(noise, shape: tuple[int, int]):
    """Return ``(s, None)`` for finite spherical noise, else ``(None, w)``
    with ``w`` the per-element precision (0 where unobserved)."""
    var = np.asarray(noise, dtype=np.float64)
    if np.any(np.isnan(var)) or np.any(var <= 0):
        raise InvalidArgument("noise variances must be positive (inf allowed for unobserved)")
    if var.ndim == 0 and np.isfinite(var):
        return float(var), None
    try:
        var = np.broadcast_to(var, shape)
    except ValueError:
        raise InvalidArgument(f"noise of shape {var.shape} does not match patches {shape}") from None
    with np.errstate(divide="ignore"):
        w = np.where(np.isinf(var), 0.0, 1.0 / var)
    return None, w


def _gumbel_argmax(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.argmax(logits + rng.gumbel(size=logits.shape), axis=1)


class _LowRankNoise:
    """Per-patch precisions ``w`` written as ``a I + diag(b)`` with ``a`` the
    row minimum; ``b`` is non-zero on at most ``r`` elements per row, listed
    in ``idx`` (padded rows carry ``sb = 0``)."""

    def __init__(self, w: np.ndarray, r: int):
        self.w = w
        self.a = w.min(axis=1)
        b = w - self.a[:, None]
        extra = b > 0
        self.idx = np.argsort(~extra, axis=1, kind="stable")[:, :r]
        self.valid = np.take_along_axis(extra, self.idx, axis=1)
        self.b = np.where(self.valid, np.take_along_axis(b, self.idx, axis=1), 0.0)
        self.sb = np.sqrt(self.b)
        self.r = r

    @classmethod
    def split(cls, w: np.ndarray):
        """The split when the extra precision has rank at most ``d / 2``."""
        w_min = w.min(axis=1, keepdims=True)
        r = int((w > w_min).sum(axis=1).max())
        return cls(w, r) if 2 * r <= w.shape[1] else None


class PatchPrior(ABC):
    """Common interface of the patch priors."""

    patch_size: int
    channels: int

    @property
    def dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @abstractmethod
    def log_density(self, x) -> np.ndarray: ...

    @abstractmethod
    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray: ...

    @abstractmethod
    def sample_posterior(self, y, noise, rng: np.random.Generator) -> np.ndarray: ...

    @abstractmethod
    def map_posterior(self, y, noise) -> np.ndarray: ...


class GmmPrior(PatchPrior):
    """Gaussian mixture over patch vectors.

    The covariances are held through their lower Cholesky factors ``chol``;
    ``covariances`` is always ``chol @ chol.T``. Use :meth:`from_covariances`
    to build a prior from covariance matrices.
    """

    def __init__(self, weights, means, chol, patch_size: int, channels: int = 1):
        weights = np.array(weights, dtype=np.float64)
        means = np.array(means, dtype=np.float64)
        chol = np.array(chol, dtype=np.float64)
        self.patch_size = int(patch_size)
        self.channels = int(channels)
        d = self.dim
        K = weights.shape[0]
        if weights.ndim != 1 or K < 1:
            raise InvalidArgument("weights must be a non-empty vector")
        if means.shape != (K, d) or chol.shape != (K, d, d):
            raise InvalidArgument(
                f"inconsistent shapes: weights {weights.shape}, means {means.shape}, chol {chol.shape} for dim {d}"
            )
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-8:
            raise InvalidArgument("weights must be positive and sum to 1")
        if not np.all(np.isfinite(means)):
            raise InvalidArgument("means must be finite")
        chol = np.tril(chol)
        for k in range(K):
            diag = np.diagonal(chol[k])
            if not (np.all(np.isfinite(chol[k])) and np.all(diag > 0)):
                raise NumericalFailure(f"component {k}: covariance factor is not positive definite")
        self.weights = weights
        self.means = means
        self.chol = chol
        self.covariances = chol @ np.swapaxes(chol, 1, 2)
        self.log_weights = np.log(weights)
        self.log_dets = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        # eigenbasis for the spherical-noise fast path
        self.eigvals, self.eigvecs = np.linalg.eigh(self.covariances)
        self.eigvals = np.maximum(self.eigvals, 0.0)
        self.eigvecs.setflags(write=False)
        for arr in (self.weights, self.means, self.chol, self.covariances):
            arr.setflags(write=False)

    @classmethod
    def from_covariances(cls, weights, means, covariances, patch_size: int, channels: int = 1):
        covariances = np.asarray(covariances, dtype=np.float64)
        chol = np.empty_like(covariances)
        for k, cov in enumerate(covariances):
            try:
                chol[k] = np.linalg.cholesky(0.5 * (cov + cov.T))
            except np.linalg.LinAlgError:
                raise NumericalFailure(f"component {k}: covariance is not positive definite") from None
        return cls(weights, means, chol, patch_size, channels)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def __repr__(self):
        return f"GmmPrior(K={self.n_components}, patch_size={self.patch_size}, channels={self.channels})"

    # -- densities -----------------------------------------------------------

    def component_log_pdf(self, x) -> np.ndarray:
        """``log N(x; mu_k, Sigma_k)`` as an ``(n, K)`` array."""
        x, _ = _as_batch(x, self.dim)
        out = np.empty((x.shape[0], self.n_components))
        for k in range(self.n_components):
            z = solve_triangular(self.chol[k], (x - self.means[k]).T, lower=True, check_finite=False)
            out[:, k] = -0.5 * (self.dim * _LOG_2PI + self.log_dets[k] + np.sum(z * z, axis=0))
        return out

    def log_density(self, x) -> np.ndarray:
        x, single = _as_batch(x, self.dim)
        out = logsumexp(self.component_log_pdf(x) + self.log_weights, axis=1)
        return out[0] if single else out

    def log_marginals(self, y, noise) -> np.ndarray:
        """``log pi_k + log N(y; mu_k, Sigma_k + noise)`` as ``(n, K)``."""
        y, _ = _as_batch(y, self.dim)
        s, w = _parse_noise(noise, y.shape)
        if s is not None:
            out = np.empty((y.shape[0], self.n_components))
            for k in range(self.n_components):
                e = self.eigvals[k] + s
                proj = (y - self.means[k]) @ self.eigvecs[k]
                out[:, k] = -0.5 * (self.dim * _LOG_2PI + np.log(e).sum() + (proj * proj / e).sum(axis=1))
            return out + self.log_weights
        lr = _LowRankNoise.split(w)
        if lr is not None:
            return self._low_rank_marginals(y, lr) + self.log_weights
        return self._log_marginals_diag(y, w) + self.log_weights

    def _log_marginals_diag(self, y, w):
        # With W = D^-1: det(Sigma_o + D_o) = det(I + W^.5 Sigma W^.5) / prod(w_o)
        # and the quadratic form is |L^-1 W^.5 r|^2, L = chol(I + W^.5 Sigma W^.5).
        n, d = y.shape
        sw = np.sqrt(w)
        observed = w > 0
        n_obs = observed.sum(axis=1)
        log_w = np.where(observed, np.log(np.where(observed, w, 1.0)), 0.0).sum(axis=1)
        eye = np.eye(d)
        out = np.empty((n, self.n_components))
        for k in range(self.n_components):
            B = eye + sw[:, :, None] * self.covariances[k] * sw[:, None, :]
            try:
                L = np.linalg.cholesky(B)
            except np.linalg.LinAlgError:
                raise NumericalFailure(f"component {k}: marginal covariance not positive definite") from None
            v = np.where(observed, sw * (y - self.means[k]), 0.0)
            u = np.linalg.solve(L, v[:, :, None])[:, :, 0]
            logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1) - log_w
            out[:, k] = -0.5 * (n_obs * _LOG_2PI + logdet + (u * u).sum(axis=1))
        return out

    def responsibilities(self, y, noise) -> np.ndarray:
        lm = self.log_marginals(y, noise)
        return np.exp(lm - logsumexp(lm, axis=1, keepdims=True))

    # -- posterior ------------------------------------------------------------

    def posterior_moments(self, k: int, y, noise):
        """Mean and covariance of component ``k`` of the patch posterior."""
        if not 0 <= k < self.n_components:
            raise InvalidArgument(f"component index {k} out of range")
        y, single = _as_batch(y, self.dim)
        s, w = _parse_noise(noise, y.shape)
        if w is None:
            w = np.full(y.shape, 1.0 / s)
        ks = np.full(y.shape[0], k)
        mean, S, M = self._posterior_factors(ks, y, w)
        # Sigma_post = S C^-1 S^T with C = M M^T
        A = np.linalg.solve(M, np.swapaxes(S, 1, 2))
        cov = np.swapaxes(A, 1, 2) @ A
        if single:
            return mean[0], cov[0]
        return mean, cov

    def _posterior_factors(self, ks, y, w):
        # Sigma_post = S (I + S^T W S)^-1 S^T, S = chol(Sigma_k): stable even when
        # some precisions are huge or zero.
        S = self.chol[ks]
        St = np.swapaxes(S, 1, 2)
        C = np.eye(self.dim) + St @ (w[:, :, None] * S)
        try:
            M = np.linalg.cholesky(C)
        except np.linalg.LinAlgError:
            bad = sorted(set(ks.tolist()))
            raise NumericalFailure(f"component(s) {bad}: posterior precision not positive definite") from None
        r = np.where(w > 0, y - self.means[ks], 0.0)
        rhs = (St @ (w * r)[:, :, None])
        mean = self.means[ks] + (S @ np.linalg.solve(C, rhs))[:, :, 0]
        return mean, S, M

    def _low_rank_component(self, k: int, y, lr: _LowRankNoise, z=None):
        """Log marginal, posterior mean and (with ``z``) a posterior draw of
        component ``k`` for noise precisions ``lr.a I + diag(b)``.

        The observation is split into ``y`` seen at spherical precision ``a``
        and ``y`` seen again on the ``b`` elements. The spherical part uses the
        eigenbasis of ``Sigma_k``; the extra elements enter through an
        ``r x r`` Woodbury update. ``z = (z1, z2)`` are standard normals of
        shapes ``(n, d)`` and ``(n, r)``.
        """
        n, d = y.shape
        lam, U, mu = self.eigvals[k], self.eigvecs[k], self.means[k]
        a = lr.a
        seen = a > 0
        a_safe = np.where(seen, a, 1.0)
        proj = (y - mu) @ U
        al = a[:, None] * lam
        c = lam / (1.0 + al)
        m = mu + (al / (1.0 + al) * proj) @ U.T
        e = lam + 1.0 / a_safe[:, None]
        sph = -0.5 * (d * _LOG_2PI + np.log(e).sum(axis=1) + (proj * proj / e).sum(axis=1))
        sph = np.where(seen, sph, 0.0)

        UO = U[lr.idx]
        KT = (UO * c[:, None, :]) @ U.T
        Gm = np.take_along_axis(KT, lr.idx[:, None, :], axis=2)
        Bm = np.eye(lr.r) + lr.sb[:, :, None] * Gm * lr.sb[:, None, :]
        try:
            L = np.linalg.cholesky(Bm)
        except np.linalg.LinAlgError:
            raise NumericalFailure(f"component {k}: marginal covariance not positive definite") from None
        resid = np.take_along_axis(y - m, lr.idx, axis=1)
        v = lr.sb * resid
        u = np.linalg.solve(L, v[:, :, None])[:, :, 0]
        log_b = np.where(lr.valid, np.log(np.where(lr.valid, lr.b, 1.0)), 0.0).sum(axis=1)
        logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1) - log_b
        n_extra = lr.valid.sum(axis=1)
        extra = -0.5 * (n_extra * _LOG_2PI + logdet + (u * u).sum(axis=1))
        # seeing y twice (precisions a and b) versus once (precision a + b)
        # differs by a factor free of x
        wO = np.take_along_axis(lr.w, lr.idx, axis=1)
        ratio = np.where(lr.valid & seen[:, None], a_safe[:, None] * lr.b / np.where(lr.valid, wO, 1.0), 1.0)
        corr = 0.5 * np.where(lr.valid & seen[:, None], np.log(ratio) - _LOG_2PI, 0.0).sum(axis=1)
        logml = sph + extra - corr

        def gain(vec):
            t = np.linalg.solve(Bm, vec[:, :, None])[:, :, 0]
            return np.einsum("nr,nrd->nd", lr.sb * t, KT)

        mean = m + gain(v)
        if z is None:
            return logml, mean, None
        z1, z2 = z
        x0 = m + (np.sqrt(c) * z1) @ U.T
        v0 = lr.sb * np.take_along_axis(y - x0, lr.idx, axis=1) + np.where(lr.valid, z2, 0.0)
        return logml, mean, x0 + gain(v0)

    def _low_rank_marginals(self, y, lr: _LowRankNoise) -> np.ndarray:
        out = np.empty((y.shape[0], self.n_components))
        for k in range(self.n_components):
            out[:, k] = self._low_rank_component(k, y, lr)[0]
        return out

    def _low_rank_posterior(self, ks, y, lr: _LowRankNoise, z=None) -> np.ndarray:
        out = np.empty_like(y)
        for k in np.unique(ks):
            rows = np.flatnonzero(ks == k)
            sub = _LowRankNoise.__new__(_LowRankNoise)
            for name in ("w", "a", "idx", "valid", "b", "sb"):
                setattr(sub, name, getattr(lr, name)[rows])
            sub.r = lr.r
            zk = None if z is None else (z[0][rows], z[1][rows])
            _, mean, draw = self._low_rank_component(int(k), y[rows], sub, zk)
            out[rows] = mean if z is None else draw
        return out

    def _spherical_update(self, ks, y):
        lam = self.eigvals[ks]
        U = self.eigvecs[ks]
        proj = ((y - self.means[ks])[:, None, :] @ U)[:, 0, :]
        return lam, U, proj

    def sample_posterior(self, y, noise, rng) -> np.ndarray:
        y, single = _as_batch(y, self.dim)
        s, w = _parse_noise(noise, y.shape)
        if s is not None:
            logits = self.log_marginals(y, s)
        else:
            lr = _LowRankNoise.split(w)
            if lr is not None:
                ks = _gumbel_argmax(self._low_rank_marginals(y, lr) + self.log_weights, rng)
                z = (rng.standard_normal(y.shape), rng.standard_normal((y.shape[0], lr.r)))
                out = self._low_rank_posterior(ks, y, lr, z)
                return out[0] if single else out
            logits = self._log_marginals_diag(y, w) + self.log_weights
        ks = _gumbel_argmax(logits, rng)
        z = rng.standard_normal(y.shape)
        if s is not None:
            lam, U, proj = self._spherical_update(ks, y)
            coords = lam / (lam + s) * proj + np.sqrt(lam * s / (lam + s)) * z
            out = self.means[ks] + (U @ coords[:, :, None])[:, :, 0]
        else:
            mean, S, M = self._posterior_factors(ks, y, w)
            # S M^-T z has covariance S C^-1 S^T
            out = mean + (S @ np.linalg.solve(np.swapaxes(M, 1, 2), z[:, :, None]))[:, :, 0]
        return out[0] if single else out

    def map_posterior(self, y, noise) -> np.ndarray:
        y, single = _as_batch(y, self.dim)
        s, w = _parse_noise(noise, y.shape)
        if s is not None:
            ks = np.argmax(self.log_marginals(y, s), axis=1)
            lam, U, proj = self._spherical_update(ks, y)
            out = self.means[ks] + (U @ (lam / (lam + s) * proj)[:, :, None])[:, :, 0]
        elif (lr := _LowRankNoise.split(w)) is not None:
            ks = np.argmax(self._low_rank_marginals(y, lr) + self.log_weights, axis=1)
            out = self._low_rank_posterior(ks, y, lr)
        else:
            ks = np.argmax(self._log_marginals_diag(y, w) + self.log_weights, axis=1)
            out, _, _ = self._posterior_factors(ks, y, w)
        return out[0] if single else out

    def sample(self, n: int, rng) -> np.ndarray:
        ks = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[ks] + (self.chol[ks] @ z[:, :, None])[:, :, 0]


class DictionaryPrior(PatchPrior):
    """Uniform distribution over a finite set of patch vectors (atoms)."""

    def __init__(self, atoms, patch_size: int, channels: int = 1):
        atoms = np.array(atoms, dtype=np.float64)
        self.patch_size = int(patch_size)
        self.channels = int(channels)
        if atoms.ndim != 2 or atoms.shape[0] < 1 or atoms.shape[1] != self.dim:
            raise InvalidArgument(f"atoms must be a non-empty (N, {self.dim}) array, got {atoms.shape}")
        if not np.all(np.isfinite(atoms)):
            raise InvalidArgument("atoms must be finite")
        atoms.setflags(write=False)
        self.atoms = atoms
        self._sq_norms = np.sum(atoms * atoms, axis=1)

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]

    def __repr__(self):
        return f"DictionaryPrior(N={self.n_atoms}, patch_size={self.patch_size}, channels={self.channels})"

    def nearest_atom_distance(self, x) -> np.ndarray:
        """Max-norm distance from each row of ``x`` to its closest atom."""
        x, single = _as_batch(x, self.dim)
        chunk = max(1, (1 << 22) // (x.shape[0] * self.dim))
        best = np.full(x.shape[0], np.inf)
        for start in range(0, self.n_atoms, chunk):
            block = self.atoms[start:start + chunk]
            dist = np.abs(x[:, None, :] - block[None]).max(axis=2).min(axis=1)
            best = np.minimum(best, dist)
        return best[0] if single else best

    def log_density(self, x) -> np.ndarray:
        x, single = _as_batch(x, self.dim)
        out = np.where(self.nearest_atom_distance(x) <= DICT_TOL, 0.0, -np.inf)
        return out[0] if single else out

    def log_likelihoods(self, y, noise) -> np.ndarray:
        """``log p(y | atom)`` up to a per-row constant, shape ``(n, N)``."""
        y, _ = _as_batch(y, self.dim)
        s, w = _parse_noise(noise, y.shape)
        if s is not None:
            sq = np.sum(y * y, axis=1)[:, None] - 2.0 * y @ self.atoms.T + self._sq_norms
            return -0.5 * np.maximum(sq, 0.0) / s
        wy = np.where(w > 0, w * y, 0.0)
        quad = -2.0 * wy @ self.atoms.T + w @ (self.atoms * self.atoms).T
        return -0.5 * quad

    def sample_posterior(self, y, noise, rng) -> np.ndarray:
        y, single = _as_batch(y, self.dim)
        idx = _gumbel_argmax(self.log_likelihoods(y, noise), rng)
        out = self.atoms[idx].copy()
        return out[0] if single else out

    def map_posterior(self, y, noise) -> np.ndarray:
        y, single = _as_batch(y, self.dim)
        idx = np.argmax(self.log_likelihoods(y, noise), axis=1)
        out = self.atoms[idx].copy()
        return out[0] if single else out

    def sample(self, n: int, rng) -> np.ndarray:
        return self.atoms[rng.integers(self.n_atoms, size=n)].copy()


# -- functional interface ---------------------------------------------------------


def _require_gmm(prior):
    if not isinstance(prior, GmmPrior):
        raise InvalidArgument(f"expected a GmmPrior, got {type(prior).__name__}")


def gmm_responsibilities(prior: GmmPrior, y, noise) -> np.ndarray:
    """Posterior component probabilities ``p(k | y)`` for noisy patch(es) ``y``."""
    _require_gmm(prior)
    y_arr = np.asarray(y, dtype=np.float64)
    r = prior.responsibilities(y_arr, noise)
    return r[0] if y_arr.ndim == 1 else r


def gmm_posterior_moments(prior: GmmPrior, k: int, y, noise):
    """``(mean, covariance)`` of ``x | y, k``."""
    _require_gmm(prior)
    return prior.posterior_moments(k, y, noise)


def sample_patch_posterior(prior: PatchPrior, y, noise, rng) -> np.ndarray:
    return prior.sample_posterior(y, noise, rng)


def map_patch_posterior(prior: PatchPrior, y, noise) -> np.ndarray:
    """Most probable component's posterior mean (GMM) or most likely atom.

    Ties go to the lowest index.
    """
    return prior.map_posterior(y, noise)


def log_density(prior: PatchPrior, x):
    return prior.log_density(x)


def sample_prior(prior: PatchPrior, rng, n: int | None = None) -> np.ndarray:
    out = prior.sample(1 if n is None else n, rng)
    return out[0] if n is None else out


# -- EM training --------------------------------------------------------------------


def _e_step(X, weights, means, covs):
    n, d = X.shape
    logp = np.empty((n, len(weights)))
    for k in range(len(weights)):
        try:
            L = np.linalg.cholesky(covs[k])
        except np.linalg.LinAlgError:
            raise NumericalFailure(f"component {k}: covariance is not positive definite") from None
        z = solve_triangular(L, (X - means[k]).T, lower=True, check_finite=False)
        logdet = 2.0 * np.log(np.diag(L)).sum()
        logp[:, k] = np.log(weights[k]) - 0.5 * (d * _LOG_2PI + logdet + np.sum(z * z, axis=0))
    norm = logsumexp(logp, axis=1)
    return np.exp(logp - norm[:, None]), float(norm.mean())


def train_gmm_em(
    patches,
    n_components: int,
    iters: int = 30,
    seed: int = 0,
    patch_size: int | None = None,
    channels: int = 1,
    floor: float = COV_FLOOR,
    return_trace: bool = False,
):
    """Fit a full-covariance GMM to patch vectors by EM.

    Means start from seeded k-means++ on a subsample of ``10 * K`` patches,
    covariances from the global sample covariance and weights uniform.
    ``floor`` is added to every covariance diagonal after each M-step.

    Parameters
    ----------
    patches : array_like, shape (n, d)
    n_components : int
        Number of mixture components ``K``.
    iters : int
        EM iterations.
    seed : int
        Seed for the initialization and for re-seeding collapsed components.
    patch_size, channels : int
        Patch geometry; ``patch_size`` defaults to ``sqrt(d / channels)``.
    return_trace : bool
        Also return the mean log-likelihood before the first and after every
        iteration (length ``iters + 1``).
    """
    X = np.asarray(patches, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidArgument(f"patches must be an (n, d) array, got shape {X.shape}")
    n, d = X.shape
    K = int(n_components)
    if K < 1 or K > n:
        raise InvalidArgument(f"need 1 <= K <= number of patches ({n}), got K={K}")
    if patch_size is None:
        patch_size = int(round(np.sqrt(d / channels)))
    if patch_size * patch_size * channels != d:
        raise InvalidArgument(f"patch dimension {d} is not {patch_size}^2 x {channels}")

    rng = np.random.default_rng(seed)
    sub = X[rng.choice(n, size=min(n, 10 * K), replace=False)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        means, _ = kmeans2(sub, K, minit="++", seed=rng)
    diff = X - X.mean(axis=0)
    global_cov = diff.T @ diff / n + floor * np.eye(d)
    covs = np.repeat(global_cov[None], K, axis=0)
    weights = np.full(K, 1.0 / K)

    resp, ll = _e_step(X, weights, means, covs)
    trace = [ll]
    for it in range(iters):
        nk = resp.sum(axis=0)
        means = (resp.T @ X) / np.maximum(nk, 1e-300)[:, None]
        for k in range(K):
            if nk[k] < 1.0:
                log.warning("EM iteration %d: component %d collapsed; re-seeding from a random patch", it, k)
                means[k] = X[rng.integers(n)]
                covs[k] = global_cov
                nk[k] = n / K
                continue
            dk = X - means[k]
            covs[k] = (resp[:, k, None] * dk).T @ dk / nk[k] + floor * np.eye(d)
            covs[k] = 0.5 * (covs[k] + covs[k].T)
        weights = nk / nk.sum()
        resp, ll = _e_step(X, weights, means, covs)
        trace.append(ll)

    prior = GmmPrior.from_covariances(weights, means, covs, patch_size, channels)
    if return_trace:
        return prior, np.array(trace)
    return prior
