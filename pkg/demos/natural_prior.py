"""Train (once) and cache the small natural-image prior the demos share."""
import os

import numpy as np
from skimage import data

from patchgibbs import load_prior, save_prior, train_gmm_em

TRAIN_IMAGES = ("moon", "coins", "grass", "brick", "gravel", "clock")


def output_dir() -> str:
    path = os.environ.get("PATCHGIBBS_DEMO_DIR", "demo_output")
    os.makedirs(path, exist_ok=True)
    return path


def natural_prior(k: int = 20, n_per_image: int = 5000, p: int = 8):
    path = os.path.join(output_dir(), f"natural_k{k}_p{p}.prior")
    if os.path.exists(path):
        return load_prior(path)
    rng = np.random.default_rng(0)
    rows = []
    for name in TRAIN_IMAGES:
        img = getattr(data, name)() / 255.0
        ys = rng.integers(0, img.shape[0] - p + 1, n_per_image)
        xs = rng.integers(0, img.shape[1] - p + 1, n_per_image)
        rows.append(np.stack([img[a:a + p, b:b + p].ravel() for a, b in zip(ys, xs)]))
    print(f"training a K={k} prior on {len(rows) * n_per_image} patches (about half a minute)")
    prior = train_gmm_em(np.concatenate(rows), k, 30, seed=0, patch_size=p)
    save_prior(prior, path)
    return prior
