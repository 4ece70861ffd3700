"""Command-line front end.

Every restoration command writes a manifest (flat ``key=value`` text) next to
its output. ``patchgibbs replay MANIFEST`` re-runs the recorded command from
the resolved settings in the manifest and reproduces the outputs bit for bit.

Exit codes: 0 success, 2 invalid argument, 3 format error, 4 numerical
failure, 5 I/O error.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import time
from importlib.metadata import PackageNotFoundError, version

import numpy as np

from .degradation import Convolution, GaussianKernelSpec, Identity, Mask, build_gaussian_kernel, load_kernel
from .errors import FormatError, InvalidArgument, NumericalFailure
from .image import make_grids, psnr
from .model_io import load_prior, read_image, save_prior, write_image
from .priors import train_gmm_em
from .rng import substream
from .sampler import DEBLUR_GAMMA_SCALE, SamplerConfig, Schedule, epll_energy, mmse_estimate, run_denoise, run_restore

__all__ = ["main", "build_parser", "read_manifest", "write_manifest"]

log = logging.getLogger("patchgibbs")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_FORMAT = 3
EXIT_NUMERICAL = 4
EXIT_IO = 5

# (tau, power, scale) per task; a scale of None means 1 / sigma^2
BETA_DEFAULTS = {"denoise": (18.0, 2.2, None), "inpaint": (6.0, 2.2, 2.0), "deblur": (18.0, 2.2, 10.0)}
GAMMA_DEFAULTS = (1.0, 0.65, DEBLUR_GAMMA_SCALE)
SIGMA_DEFAULTS = {"deblur": 2.5, "inpaint": 1.0}


def _tool_version() -> str:
    try:
        return version("patchgibbs")
    except PackageNotFoundError:
        return "unknown"


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# -- manifests ----------------------------------------------------------------------


def write_manifest(path, entries: dict) -> None:
    """Write ``entries`` as sorted ``key=value`` lines."""
    lines = []
    for key in sorted(entries):
        value = entries[key]
        text = "" if value is None else str(value)
        if "\n" in text or "=" in key:
            raise InvalidArgument(f"manifest entry {key!r} cannot be written on one line")
        lines.append(f"{key}={text}\n")
    with open(path, "w") as fh:
        fh.writelines(lines)


def read_manifest(path) -> dict:
    entries = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{n}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            entries[key.strip()] = value
    return entries


# -- argument parsing ---------------------------------------------------------------


def _add_sampler_args(p: argparse.ArgumentParser, task: str):
    p.add_argument("input", help="degraded image (PNG, PGM or PPM)")
    p.add_argument("--prior", required=True, help="prior file written by train-prior")
    default_sigma = SIGMA_DEFAULTS.get(task)
    p.add_argument(
        "--sigma",
        type=float,
        required=default_sigma is None,
        default=default_sigma,
        help="noise standard deviation on the 0-255 scale"
        + ("" if default_sigma is None else f" (default {default_sigma})"),
    )
    p.add_argument("--mode", choices=("sample", "map", "mmse"), default="sample")
    p.add_argument("--samples", type=int, default=20, help="posterior samples averaged by --mode mmse")
    p.add_argument("--iters", type=int, default=100, help="outer iterations T")
    p.add_argument("--grids", type=int, default=32, help="number of patch grids G")
    p.add_argument("--grid-seed", type=int, default=0, help="seed for the grid offsets")
    p.add_argument("--seed", type=int, default=0)
    tau, power, _ = BETA_DEFAULTS[task]
    p.add_argument("--beta-tau", type=float, default=tau)
    p.add_argument("--beta-power", type=float, default=power)
    p.add_argument("--beta-scale", type=float, default=None, help="default depends on the task")
    if task == "deblur":
        p.add_argument("--gamma-tau", type=float, default=GAMMA_DEFAULTS[0])
        p.add_argument("--gamma-power", type=float, default=GAMMA_DEFAULTS[1])
        p.add_argument("--gamma-scale", type=float, default=GAMMA_DEFAULTS[2])
        p.add_argument("--backend", choices=("auto", "spectral", "iterative"), default="auto")
    p.add_argument("--no-final-smooth", action="store_true", help="skip the closing pass at 100x the final beta")
    p.add_argument("--coupling", choices=("exact", "average"), default="exact")
    p.add_argument("--likelihood", choices=("full", "split"), default="full")
    p.add_argument("--workers", type=int, default=1, help="threads for per-patch draws")
    p.add_argument("--ground-truth", help="clean image; PSNR is reported when given")
    p.add_argument("--out", required=True, help="output image path")
    p.add_argument("--manifest", help="manifest path (default: OUT.manifest)")
    p.add_argument("--save-samples", action="store_true", help="with --mode mmse, also write every sample")


def _add_kernel_args(p: argparse.ArgumentParser):
    g = p.add_argument_group("blur kernel")
    g.add_argument("--kernel-scale", type=float, help="isotropic Gaussian kernel standard deviation")
    g.add_argument("--kernel-sx", type=float, help="horizontal standard deviation of an elliptical kernel")
    g.add_argument("--kernel-sy", type=float, help="vertical standard deviation of an elliptical kernel")
    g.add_argument("--kernel-rho", type=float, default=0.0, help="correlation of an elliptical kernel")
    g.add_argument("--kernel-file", help="text file with one kernel row per line")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchgibbs", description="Posterior sampling with patch priors.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-prior", help="fit a GMM patch prior to a directory of images")
    p.add_argument("image_dir")
    p.add_argument("--k", type=int, default=200, help="mixture components")
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--n-patches", type=int, default=100000)
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")

    for task, text in (
        ("denoise", "remove Gaussian noise"),
        ("deblur", "undo a known blur"),
        ("inpaint", "fill in masked pixels"),
    ):
        p = sub.add_parser(task, help=text)
        _add_sampler_args(p, task)
        if task == "deblur":
            _add_kernel_args(p)
        if task == "inpaint":
            p.add_argument("--mask", required=True, help="image that is 0 at missing pixels")

    p = sub.add_parser("energy", help="print the EPLL energy of an image")
    p.add_argument("x")
    p.add_argument("y")
    p.add_argument("--prior", required=True)
    p.add_argument("--sigma", type=float, required=True, help="0-255 scale")
    p.add_argument("--grids", type=int, default=32)
    p.add_argument("--grid-seed", type=int, default=0)
    p.add_argument("--mask")
    _add_kernel_args(p)

    p = sub.add_parser("sample-prior", help="write patches drawn from a prior")
    p.add_argument("--prior", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scale", type=int, default=1, help="integer upscaling of each written patch")

    p = sub.add_parser("psnr", help="print the PSNR between two images")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--peak", type=float, default=1.0)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="output path (default: the one recorded in the manifest)")
    return parser


# -- resolved settings ----------------------------------------------------------------


def _kernel_settings(args) -> dict:
    chosen = [
        name
        for name, given in (
            ("scale", args.kernel_scale is not None),
            ("elliptical", args.kernel_sx is not None or args.kernel_sy is not None),
            ("file", args.kernel_file is not None),
        )
        if given
    ]
    if len(chosen) > 1:
        raise InvalidArgument("give only one of --kernel-scale, --kernel-sx/--kernel-sy, --kernel-file")
    if not chosen:
        return {}
    if chosen[0] == "scale":
        return {"kernel": "gaussian", "kernel_sx": args.kernel_scale, "kernel_sy": args.kernel_scale, "kernel_rho": 0.0}
    if chosen[0] == "elliptical":
        if args.kernel_sx is None or args.kernel_sy is None:
            raise InvalidArgument("an elliptical kernel needs both --kernel-sx and --kernel-sy")
        return {"kernel": "gaussian", "kernel_sx": args.kernel_sx, "kernel_sy": args.kernel_sy, "kernel_rho": args.kernel_rho}
    return {"kernel": "file", "kernel_file": os.path.abspath(args.kernel_file)}


def _resolve(args) -> dict:
    """Turn parsed arguments into the complete settings of a restoration run."""
    task = args.command
    if args.sigma is None or not args.sigma > 0:
        raise InvalidArgument("--sigma must be positive")
    for name in ("iters", "grids", "samples", "workers"):
        if getattr(args, name) < 1:
            raise InvalidArgument(f"--{name} must be at least 1")
    sigma = args.sigma / 255.0
    tau, power, scale = BETA_DEFAULTS[task]
    beta_scale = args.beta_scale if args.beta_scale is not None else (1.0 / sigma**2 if scale is None else scale)
    s = {
        "command": task,
        "input": os.path.abspath(args.input),
        "prior": os.path.abspath(args.prior),
        "sigma_255": args.sigma,
        "sigma": sigma,
        "mode": args.mode,
        "samples": args.samples if args.mode == "mmse" else 1,
        "iters": args.iters,
        "grids": args.grids,
        "grid_seed": args.grid_seed,
        "seed": args.seed,
        "beta_tau": args.beta_tau,
        "beta_power": args.beta_power,
        "beta_scale": beta_scale,
        "final_smooth": not args.no_final_smooth,
        "coupling": args.coupling,
        "likelihood": args.likelihood,
        "workers": args.workers,
        "ground_truth": os.path.abspath(args.ground_truth) if args.ground_truth else "",
        "out": os.path.abspath(args.out),
        "save_samples": bool(args.save_samples),
    }
    if task == "deblur":
        k = _kernel_settings(args)
        if not k:
            raise InvalidArgument("deblur needs --kernel-scale, --kernel-sx/--kernel-sy or --kernel-file")
        s.update(k)
        s.update(
            gamma_tau=args.gamma_tau,
            gamma_power=args.gamma_power,
            gamma_scale=args.gamma_scale,
            backend=args.backend,
        )
    if task == "inpaint":
        s["mask"] = os.path.abspath(args.mask)
    return s


_TYPES = {
    "sigma_255": float, "sigma": float, "samples": int, "iters": int, "grids": int, "grid_seed": int,
    "seed": int, "beta_tau": float, "beta_power": float, "beta_scale": float, "gamma_tau": float,
    "gamma_power": float, "gamma_scale": float, "kernel_sx": float, "kernel_sy": float,
    "kernel_rho": float, "workers": int,
}
_BOOLS = ("final_smooth", "save_samples")


def _settings_from_manifest(m: dict) -> dict:
    s = {}
    for key, value in m.items():
        if key in _TYPES:
            try:
                s[key] = _TYPES[key](value)
            except ValueError:
                raise FormatError(f"manifest entry {key}={value!r} is not a number") from None
        elif key in _BOOLS:
            if value not in ("True", "False"):
                raise FormatError(f"manifest entry {key}={value!r} is not True/False")
            s[key] = value == "True"
        else:
            s[key] = value
    return s


def _kernel(s: dict) -> np.ndarray:
    if s["kernel"] == "file":
        return load_kernel(s["kernel_file"])
    return build_gaussian_kernel(GaussianKernelSpec(s["kernel_sx"], s["kernel_sy"], s["kernel_rho"]))


def _read_mask(path) -> np.ndarray:
    m = read_image(path)
    return (m.mean(axis=2, keepdims=True) > 0.5).astype(np.float64)


# -- commands -------------------------------------------------------------------------


def _restore(s: dict) -> dict:
    """Run a restoration from resolved settings; returns manifest entries."""
    t0 = time.perf_counter()
    task = s["command"]
    for key in ("prior", "mask"):
        if key in s and not os.path.isfile(s[key]):
            raise InvalidArgument(f"--{key} file {s[key]} does not exist")
    y = read_image(s["input"])
    prior = load_prior(s["prior"])
    if prior.channels != y.shape[2]:
        raise InvalidArgument(f"prior has {prior.channels} channels, {s['input']} has {y.shape[2]}")
    grids = make_grids(prior.patch_size, s["grids"], s["grid_seed"])
    gamma = None
    if task == "deblur":
        gamma = Schedule(s["gamma_tau"], s["gamma_power"], s["gamma_scale"])
    cfg = SamplerConfig(
        iterations=s["iters"],
        grids=grids,
        beta=Schedule(s["beta_tau"], s["beta_power"], s["beta_scale"]),
        gamma=gamma,
        mode="map" if s["mode"] == "map" else "sample",
        final_smooth=s["final_smooth"],
        seed=s["seed"],
        coupling=s["coupling"],
        likelihood=s["likelihood"],
        workers=s["workers"],
        backend=s.get("backend", "auto"),
    )
    var = s["sigma"] ** 2
    entries = {}

    if task == "denoise":
        def chain(j):
            return run_denoise(y, var, prior, cfg, chain=j)
    elif task == "inpaint":
        mask = _read_mask(s["mask"])
        if mask.shape[:2] != y.shape[:2]:
            raise InvalidArgument(f"mask shape {mask.shape[:2]} does not match image {y.shape[:2]}")
        noise = np.where(np.broadcast_to(mask, y.shape) > 0, var, np.inf)
        entries["mask_sha256"] = _sha256(s["mask"])
        entries["observed_fraction"] = float(mask.mean())

        def chain(j):
            return run_denoise(np.where(noise < np.inf, y, 0.0), noise, prior, cfg, chain=j)
    else:
        op = Convolution(_kernel(s))
        if s["kernel"] == "file":
            entries["kernel_sha256"] = _sha256(s["kernel_file"])

        def chain(j):
            return run_restore(y, op, var, prior, cfg, chain=j)

    results = []

    def estimate(j):
        r = chain(j)
        results.append(r)
        return r.estimate

    if s["mode"] == "mmse":
        samples = []

        def keep(j):
            x = estimate(j)
            samples.append((j, x))
            return x

        est = mmse_estimate(keep, s["samples"])
    else:
        est = estimate(0)

    out = s["out"]
    write_image(est, out)
    entries["out_sha256"] = _sha256(out)
    if s["mode"] == "mmse" and s["save_samples"]:
        stem, ext = os.path.splitext(out)
        for j, x in sorted(samples, key=lambda t: t[0]):
            write_image(x, f"{stem}_sample{j:03d}{ext}")
    if s["ground_truth"]:
        gt = read_image(s["ground_truth"])
        entries["psnr_output"] = psnr(np.clip(est, 0, 1), gt)
        entries["psnr_input"] = psnr(y, gt)
        print(f"PSNR input {entries['psnr_input']:.3f} dB, output {entries['psnr_output']:.3f} dB")
    entries["input_sha256"] = _sha256(s["input"])
    entries["prior_sha256"] = _sha256(s["prior"])
    entries["chain_digests"] = ",".join(r.digest for r in results)
    entries["seconds_total"] = round(time.perf_counter() - t0, 3)
    entries["version"] = _tool_version()
    print(f"wrote {out}")
    return entries


def _run_restoration(s: dict, manifest_path) -> None:
    extra = _restore(s)
    manifest = dict(s)
    manifest.update(extra)
    path = manifest_path or s["out"] + ".manifest"
    write_manifest(path, manifest)
    print(f"wrote {path}")


def cmd_train_prior(args) -> None:
    t0 = time.perf_counter()
    if args.k < 1 or args.patch_size < 1 or args.n_patches < 1 or args.iters < 0:
        raise InvalidArgument("--k, --patch-size and --n-patches must be positive, --iters non-negative")
    names = sorted(
        f for f in os.listdir(args.image_dir) if os.path.splitext(f)[1].lower() in (".png", ".pgm", ".ppm", ".pnm")
    )
    if not names:
        raise InvalidArgument(f"no PNG/PGM/PPM images in {args.image_dir}")
    images = [read_image(os.path.join(args.image_dir, f)) for f in names]
    channels = {im.shape[2] for im in images}
    if len(channels) != 1:
        raise InvalidArgument(f"images mix channel counts {sorted(channels)}")
    p = args.patch_size
    images = [im for im in images if im.shape[0] >= p and im.shape[1] >= p]
    if not images:
        raise InvalidArgument(f"no image is at least {p}x{p}")
    # patches are spread over the images in proportion to how many positions each offers
    counts = np.array([(im.shape[0] - p + 1) * (im.shape[1] - p + 1) for im in images], dtype=np.float64)
    rng = substream(args.seed, 0)
    which = rng.choice(len(images), size=args.n_patches, p=counts / counts.sum())
    rows = []
    for i, im in enumerate(images):
        n = int(np.sum(which == i))
        if n == 0:
            continue
        ys = rng.integers(0, im.shape[0] - p + 1, n)
        xs = rng.integers(0, im.shape[1] - p + 1, n)
        rows.append(np.stack([im[a:a + p, b:b + p].reshape(-1) for a, b in zip(ys, xs)]))
    X = np.concatenate(rows)
    if X.shape[0] < args.k:
        raise InvalidArgument(f"{X.shape[0]} patches are too few for {args.k} components")
    prior, trace = train_gmm_em(X, args.k, args.iters, seed=args.seed, patch_size=p, channels=images[0].shape[2], return_trace=True)
    save_prior(prior, args.out)
    print(f"trained K={args.k} on {X.shape[0]} patches; mean log-likelihood {trace[0]:.4f} -> {trace[-1]:.4f}")
    print(f"wrote {args.out}")
    manifest = {
        "command": "train-prior",
        "image_dir": os.path.abspath(args.image_dir),
        "images": ",".join(names),
        "k": args.k,
        "patch_size": p,
        "n_patches": args.n_patches,
        "iters": args.iters,
        "seed": args.seed,
        "out": os.path.abspath(args.out),
        "out_sha256": _sha256(args.out),
        "loglik_trace": ",".join(f"{v:.10g}" for v in trace),
        "seconds_total": round(time.perf_counter() - t0, 3),
        "version": _tool_version(),
    }
    write_manifest(args.manifest or args.out + ".manifest", manifest)


def cmd_energy(args) -> None:
    if not args.sigma > 0:
        raise InvalidArgument("--sigma must be positive")
    x = read_image(args.x)
    y = read_image(args.y)
    prior = load_prior(args.prior)
    k = _kernel_settings(args)
    if k and args.mask:
        raise InvalidArgument("give either a kernel or --mask, not both")
    if k:
        op = Convolution(_kernel(k))
    elif args.mask:
        op = Mask(_read_mask(args.mask))
    else:
        op = Identity()
    grids = make_grids(prior.patch_size, args.grids, args.grid_seed)
    print(f"{epll_energy(x, y, op, (args.sigma / 255.0) ** 2, grids, prior):.10g}")


def cmd_sample_prior(args) -> None:
    if args.count < 1 or args.scale < 1:
        raise InvalidArgument("--count and --scale must be positive")
    prior = load_prior(args.prior)
    draws = prior.sample(args.count, substream(args.seed, 0))
    os.makedirs(args.out, exist_ok=True)
    p, c = prior.patch_size, prior.channels
    for i, v in enumerate(draws):
        patch = v.reshape(p, p, c)
        if args.scale > 1:
            patch = np.kron(patch, np.ones((args.scale, args.scale, 1)))
        write_image(patch, os.path.join(args.out, f"patch_{i:04d}.png"))
    print(f"wrote {args.count} patches to {args.out}")


def cmd_psnr(args) -> None:
    print(f"{psnr(read_image(args.a), read_image(args.b), args.peak):.6f}")


def cmd_replay(args) -> None:
    s = _settings_from_manifest(read_manifest(args.manifest))
    if s.get("command") not in BETA_DEFAULTS:
        raise FormatError(f"{args.manifest}: cannot replay command {s.get('command')!r}")
    for key in ("input", "prior"):
        digest = s.get(key + "_sha256")
        if digest and _sha256(s[key]) != digest:
            log.warning("%s has changed since the manifest was written", s[key])
    settings = {k: v for k, v in s.items() if k not in _DERIVED}
    if args.out:
        settings["out"] = os.path.abspath(args.out)
    extra = _restore(settings)
    if "out_sha256" in s:
        same = extra["out_sha256"] == s["out_sha256"]
        print("output matches the manifest" if same else "output DIFFERS from the manifest")


# manifest entries that describe a run's results rather than its settings
_DERIVED = {
    "out_sha256", "input_sha256", "prior_sha256", "mask_sha256", "kernel_sha256", "psnr_output",
    "psnr_input", "chain_digests", "seconds_total", "version", "observed_fraction",
}


def _dispatch(args) -> None:
    if args.command in BETA_DEFAULTS:
        _run_restoration(_resolve(args), args.manifest)
    elif args.command == "train-prior":
        cmd_train_prior(args)
    elif args.command == "energy":
        cmd_energy(args)
    elif args.command == "sample-prior":
        cmd_sample_prior(args)
    elif args.command == "psnr":
        cmd_psnr(args)
    elif args.command == "replay":
        cmd_replay(args)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        _dispatch(args)
    except InvalidArgument as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
