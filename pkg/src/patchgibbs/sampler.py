"""Gibbs chains over grids of non-overlapping patches.

Each grid ``g`` carries its own copy ``x_g`` of the image. Neighbouring copies
are tied by ``exp(-beta |x_g - x_{g-1}|^2)`` and every copy sees the data
through ``exp(-|H x_g - y|^2 / (2 s sigma^2))``; annealing ``beta`` upward
forces the copies to agree. With ``likelihood="split"`` the data term is
shared out between the grids (``s = G``). The default ``"full"`` gives every
grid the whole likelihood (``s = 1``), which keeps the data-to-prior balance
of EPLL, where each pixel's data term is weighed against every patch that
covers it. For diagonal ``H`` each grid update is an
independent posterior draw per patch (:func:`run_denoise`); for general ``H``
an auxiliary image ``t`` splits the data step from the patch step
(:func:`run_restore`).
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import degradation
from .degradation import Identity, LinearOperator, Mask
from .errors import InvalidArgument, NumericalFailure
from .image import (
    GridSet,
    as_image,
    assemble_grid_patches,
    crop,
    extract_grid_patches,
    make_grids,
    pad_reflect,
)
from .priors import PatchPrior
from .rng import stream_digest, substream

__all__ = [
    "Schedule",
    "SamplerConfig",
    "RestorationResult",
    "schedule_eval",
    "denoise_config",
    "inpaint_config",
    "deblur_config",
    "sweep_order",
    "run_denoise",
    "run_restore",
    "mmse_estimate",
    "epll_energy",
    "data_weight",
]

log = logging.getLogger(__name__)

FINAL_BETA_FACTOR = 100.0
MISSING_INIT = 0.5


@dataclass(frozen=True)
class Schedule:
    """``f(i) = (1 + (i / tau) ** power) * scale``."""

    tau: float
    power: float
    scale: float

    def __post_init__(self):
        if self.tau <= 0 or self.power <= 0 or self.scale <= 0:
            raise InvalidArgument(f"schedule parameters must be positive, got {self}")

    def __call__(self, i: float) -> float:
        if i < 0:
            raise InvalidArgument(f"iteration must be non-negative, got {i}")
        return (1.0 + (i / self.tau) ** self.power) * self.scale


def schedule_eval(s: Schedule, i: float) -> float:
    return s(i)


@dataclass(frozen=True)
class SamplerConfig:
    """Chain settings.

    ``coupling="exact"`` uses the Gibbs conditionals of the chain-coupled
    joint: an interior grid sees the mean of both neighbours with weight
    ``2 beta``, an end grid its single neighbour with weight ``beta``.
    ``coupling="average"`` always uses the neighbour mean with weight ``beta``.
    ``margin=None`` pads by the patch size unless one offset-(0, 0) grid tiles
    the image exactly. ``likelihood`` selects the per-grid data weight
    ``1 / (2 sigma^2)`` (``"full"``) or ``1 / (2 G sigma^2)`` (``"split"``).
    """

    iterations: int = 100
    grids: GridSet = field(default_factory=lambda: make_grids(8, 32, 0))
    beta: Schedule = Schedule(18.0, 2.2, 1.0)
    gamma: Schedule | None = None
    mode: str = "sample"
    final_smooth: bool = True
    seed: int = 0
    coupling: str = "exact"
    margin: int | None = None
    workers: int = 1
    block_size: int = 256
    backend: str = "auto"
    track_energy: bool = False
    likelihood: str = "full"

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidArgument("iterations must be at least 1")
        if self.mode not in ("sample", "map"):
            raise InvalidArgument(f"mode must be 'sample' or 'map', got {self.mode!r}")
        if self.coupling not in ("exact", "average"):
            raise InvalidArgument(f"coupling must be 'exact' or 'average', got {self.coupling!r}")
        if self.likelihood not in ("full", "split"):
            raise InvalidArgument(f"likelihood must be 'full' or 'split', got {self.likelihood!r}")
        if self.workers < 1 or self.block_size < 1:
            raise InvalidArgument("workers and block_size must be positive")


def denoise_config(sigma: float, **overrides) -> SamplerConfig:
    """Defaults for spherical-noise denoising (``sigma`` on the [0, 1] scale)."""
    return SamplerConfig(beta=Schedule(18.0, 2.2, 1.0 / sigma**2), **overrides)


def inpaint_config(**overrides) -> SamplerConfig:
    return SamplerConfig(beta=Schedule(6.0, 2.2, 2.0), **overrides)


# The gamma scale is read on the 0-255 intensity scale and converted to
# [0, 1] images; taken literally it leaves the data step an inverse filter
# that amplifies noise by orders of magnitude.
DEBLUR_GAMMA_SCALE = 0.1 * 255.0**2


def deblur_config(**overrides) -> SamplerConfig:
    return SamplerConfig(beta=Schedule(18.0, 2.2, 10.0), gamma=Schedule(1.0, 0.65, DEBLUR_GAMMA_SCALE), **overrides)


@dataclass
class RestorationResult:
    estimate: np.ndarray
    betas: list = field(default_factory=list)
    gammas: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    data_fit: list = field(default_factory=list)
    digest: str = ""
    seconds: float = 0.0


def sweep_order(n_grids: int, iterations: int, extra_passes: int = 0):
    """Grid visits as ``(iteration, grid, first_pass)`` triples.

    Grids are swept forward, then backward, then forward again without
    revisiting the turning grid: ``0..G-1, G-2..0, 1..G-1, ...``.
    """
    order = []
    for it in range(1, iterations + extra_passes + 1):
        if n_grids == 1:
            seq = [0]
        elif it == 1:
            seq = list(range(n_grids))
        elif it % 2 == 0:
            seq = list(range(n_grids - 2, -1, -1))
        else:
            seq = list(range(1, n_grids))
        order.extend((it, g, it == 1) for g in seq)
    return order


# -- internals --------------------------------------------------------------------


def _margin(cfg: SamplerConfig, shape) -> int:
    if cfg.margin is not None:
        return int(cfg.margin)
    p = cfg.grids.patch_size
    if len(cfg.grids) == 1 and shape[0] % p == 0 and shape[1] % p == 0:
        return 0
    return p


def _data_share(cfg: SamplerConfig) -> int:
    """Number of grids the data term is divided between."""
    return len(cfg.grids) if cfg.likelihood == "split" else 1


def data_weight(cfg: SamplerConfig, noise_var: float) -> float:
    """Weight ``lambda`` of ``|Hx - y|^2`` in the energy the chain anneals to."""
    return len(cfg.grids) / (2.0 * _data_share(cfg) * noise_var)


def _coupling(states, init, g, first_pass, cfg, beta):
    """Return ``(xbar, weight)`` for the update of grid ``g``."""
    G = len(states)
    if G == 1:
        return None, 0.0
    if first_pass:
        # the grid before g already holds this pass's sample; grid 0 leans on
        # its own initial value
        return (states[g - 1] if g > 0 else init), beta
    nbrs = [states[j] for j in (g - 1, g + 1) if 0 <= j < G]
    xbar = nbrs[0] if len(nbrs) == 1 else 0.5 * (nbrs[0] + nbrs[1])
    weight = beta * len(nbrs) if cfg.coupling == "exact" else beta
    return xbar, weight


def _patch_step(prior, obs, var, grid, cfg, rng_key, draw: bool):
    """Sample (or maximize) every patch of ``grid`` given observation ``obs``
    with noise variance ``var`` (scalar or per-pixel); uncovered pixels get
    the flat-prior answer."""
    shape = obs.shape
    R = extract_grid_patches(obs, grid)
    V = var if np.ndim(var) == 0 else extract_grid_patches(var, grid)
    n = R.shape[0]
    bs = cfg.block_size
    starts = list(range(0, n, bs))

    def run_block(b):
        sl = slice(starts[b], starts[b] + bs)
        Vb = V if np.ndim(V) == 0 else V[sl]
        if draw:
            return prior.sample_posterior(R[sl], Vb, substream(cfg.seed, *rng_key, 1 + b))
        return prior.map_posterior(R[sl], Vb)

    if cfg.workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            blocks = list(pool.map(run_block, range(len(starts))))
    else:
        blocks = [run_block(b) for b in range(len(starts))]
    patches = np.concatenate(blocks, axis=0)

    if draw:
        z = substream(cfg.seed, *rng_key, 0).standard_normal(shape)
        with np.errstate(invalid="ignore"):
            fill = np.where(np.isfinite(var), obs + np.sqrt(var) * z, obs)
    else:
        fill = obs
    return assemble_grid_patches(patches, grid, shape, fill=fill)


def _check_prior(prior: PatchPrior, cfg: SamplerConfig, y: np.ndarray):
    if prior.patch_size != cfg.grids.patch_size:
        raise InvalidArgument(
            f"prior patch size {prior.patch_size} does not match grid patch size {cfg.grids.patch_size}"
        )
    if prior.channels != y.shape[2]:
        raise InvalidArgument(f"prior has {prior.channels} channels, image has {y.shape[2]}")


def _finish(states, last, cfg, margin, result, t0, chain, updates):
    if cfg.mode == "map":
        est = np.mean(states, axis=0)
    else:
        est = states[last]
    result.estimate = crop(est, margin).copy()
    result.digest = stream_digest(cfg.seed, chain, updates)
    result.seconds = time.perf_counter() - t0
    return result


def _check_finite(x, it):
    if not np.all(np.isfinite(x)):
        raise NumericalFailure(f"non-finite values in the chain state at iteration {it}")


# -- chains -----------------------------------------------------------------------


def run_denoise(y, noise, prior: PatchPrior, cfg: SamplerConfig, chain: int = 0) -> RestorationResult:
    """Gibbs chain for diagonal degradations (denoising, inpainting).

    Parameters
    ----------
    y : array_like, (H, W[, C])
        Observed image.
    noise : float or array_like
        Noise variance: a float for spherical noise, or per-pixel variances of
        the image's shape with ``inf`` for missing pixels.
    prior : PatchPrior
    cfg : SamplerConfig
    chain : int
        Index of an independent chain under the same ``cfg.seed``.
    """
    t0 = time.perf_counter()
    y = as_image(y)
    _check_prior(prior, cfg, y)
    G = len(cfg.grids)
    share = _data_share(cfg)
    margin = _margin(cfg, y.shape)
    yp = pad_reflect(y, margin)

    if np.ndim(noise) == 0:
        if not noise > 0:
            raise InvalidArgument(f"noise variance must be positive, got {noise}")
        data_w = 1.0 / (share * float(noise))
        missing = None
        noise_var = float(noise)
    else:
        D = np.asarray(noise, dtype=np.float64)
        if D.ndim == 2:
            D = D[:, :, None]
        D = np.broadcast_to(D, y.shape)
        if np.any(np.isnan(D)) or np.any(D <= 0):
            raise InvalidArgument("noise variances must be positive (inf marks missing pixels)")
        Dp = pad_reflect(np.where(np.isinf(D), -1.0, D), margin)
        missing = Dp < 0
        data_w = np.where(missing, 0.0, 1.0 / (share * np.where(missing, 1.0, Dp)))
        finite = D[np.isfinite(D)]
        noise_var = float(finite.mean()) if finite.size else 1.0

    init = yp.copy()
    if missing is not None:
        init[missing] = MISSING_INIT
    states = [init.copy() for _ in range(G)]

    result = RestorationResult(estimate=y)
    draw = cfg.mode == "sample"
    extra = 1 if cfg.final_smooth else 0
    order = sweep_order(G, cfg.iterations, extra)
    beta_max = cfg.beta(cfg.iterations)
    last = 0
    for u, (it, g, first_pass) in enumerate(order):
        beta = cfg.beta(it) if it <= cfg.iterations else FINAL_BETA_FACTOR * beta_max
        xbar, c = _coupling(states, init, g, first_pass, cfg, beta)
        prec = 2.0 * c + data_w
        with np.errstate(divide="ignore", invalid="ignore"):
            if xbar is None:
                obs = np.where(data_w > 0, yp, states[g]) if np.ndim(data_w) else yp
            else:
                obs = (2.0 * c * xbar + data_w * yp) / prec
                if np.ndim(prec):
                    obs = np.where(prec > 0, obs, xbar)
            var = 1.0 / prec if np.ndim(prec) == 0 else np.where(prec > 0, 1.0 / prec, np.inf)
        states[g] = _patch_step(prior, obs, var, cfg.grids[g], cfg, (chain, u), draw)
        last = g
        if u + 1 == len(order) or order[u + 1][0] != it:
            _check_finite(states[g], it)
            result.betas.append(beta)
            result.gammas.append(None)
            resid = states[g] - yp
            if missing is not None:
                resid = np.where(missing, 0.0, resid)
            result.data_fit.append(float(np.mean(crop(resid, margin) ** 2)))
            if cfg.track_energy:
                result.energies.append(
                    epll_energy(crop(states[g], margin), y, Identity(), noise_var, cfg.grids, prior,
                                lam=data_weight(cfg, noise_var))
                )
    return _finish(states, last, cfg, margin, result, t0, chain, len(order))


def run_restore(y, op: LinearOperator, noise_var: float, prior: PatchPrior, cfg: SamplerConfig, chain: int = 0) -> RestorationResult:
    """Gibbs chain for a general linear degradation ``y = H x + noise``.

    Alternates an exact Gaussian draw of ``x_g`` (coupled to its neighbours,
    to the auxiliary image ``t`` and to the data) with an independent
    per-patch posterior draw of ``t`` at noise variance ``1 / (2 gamma)``.
    """
    t0 = time.perf_counter()
    if cfg.gamma is None:
        raise InvalidArgument("run_restore needs a gamma schedule")
    if not noise_var > 0:
        raise InvalidArgument(f"noise variance must be positive, got {noise_var}")
    y = as_image(y)
    _check_prior(prior, cfg, y)
    G = len(cfg.grids)
    margin = _margin(cfg, y.shape)
    yp = pad_reflect(y, margin)
    op_p = op.padded(margin)

    init = yp.copy()
    if isinstance(op_p, Mask):
        init = np.where(np.broadcast_to(op_p.mask, yp.shape) > 0, yp, MISSING_INIT)
    states = [init.copy() for _ in range(G)]
    t = init.copy()

    result = RestorationResult(estimate=y)
    draw = cfg.mode == "sample"
    extra = 1 if cfg.final_smooth else 0
    order = sweep_order(G, cfg.iterations, extra)
    beta_max = cfg.beta(cfg.iterations)
    zeros = np.zeros_like(yp)
    last = 0
    for u, (it, g, first_pass) in enumerate(order):
        final = it > cfg.iterations
        beta = FINAL_BETA_FACTOR * beta_max if final else cfg.beta(it)
        gamma = cfg.gamma(min(it, cfg.iterations))
        xbar, c = _coupling(states, init, g, first_pass, cfg, beta)
        rng = substream(cfg.seed, chain, u, 0) if draw else None
        states[g] = degradation.sample_data_gaussian(
            op_p, yp, noise_var, _data_share(cfg), c, zeros if xbar is None else xbar, gamma, t, rng, backend=cfg.backend
        )
        t = _patch_step(prior, states[g], 1.0 / (2.0 * gamma), cfg.grids[g], cfg, (chain, u, 1), draw)
        last = g
        if u + 1 == len(order) or order[u + 1][0] != it:
            _check_finite(states[g], it)
            _check_finite(t, it)
            result.betas.append(beta)
            result.gammas.append(gamma)
            result.data_fit.append(float(np.mean(crop(op_p.apply(states[g]) - yp, margin) ** 2)))
            if cfg.track_energy:
                result.energies.append(epll_energy(crop(states[g], margin), y, op, noise_var, cfg.grids, prior,
                                                   lam=data_weight(cfg, noise_var)))
    return _finish(states, last, cfg, margin, result, t0, chain, len(order))


def mmse_estimate(run: Callable[[int], np.ndarray], n: int, workers: int = 1) -> np.ndarray:
    """Pixelwise mean of ``run(0), ..., run(n - 1)``.

    ``run(j)`` must return the estimate of independent chain ``j``.
    """
    if n < 1:
        raise InvalidArgument(f"need at least one sample, got {n}")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(run, range(n)))
    else:
        samples = [run(j) for j in range(n)]
    total = np.zeros_like(np.asarray(samples[0], dtype=np.float64))
    for s in samples:
        total += s
    return total / n


def epll_energy(
    x,
    y,
    op: LinearOperator,
    noise_var: float,
    grids: GridSet,
    prior: PatchPrior,
    margin: int | None = None,
    lam: float | None = None,
) -> float:
    """``lam |Hx - y|^2 - sum over grids and patches of log p(patch)``.

    ``lam`` defaults to ``1 / (2 noise_var)``; :func:`data_weight` gives the
    value a chain with a given config anneals towards. Patches are taken from
    ``x`` reflect-padded the same way the chains pad.
    """
    x = as_image(x)
    y = as_image(y)
    if x.shape != y.shape:
        raise InvalidArgument(f"shape mismatch: {x.shape} vs {y.shape}")
    if margin is None:
        margin = _margin(SamplerConfig(iterations=1, grids=grids), x.shape)
    if lam is None:
        lam = 1.0 / (2.0 * noise_var)
    data = lam * float(np.sum((op.apply(x) - y) ** 2))
    xp = pad_reflect(x, margin)
    epll = 0.0
    for grid in grids:
        epll += float(np.sum(prior.log_density(extract_grid_patches(xp, grid))))
    return data - epll


