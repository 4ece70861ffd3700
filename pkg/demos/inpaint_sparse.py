"""Fill in an image from 5% of its pixels.

Missing pixels get infinite noise variance, so the patch posterior simply
marginalizes them out and predicts them from the observed ones through the
mixture covariances. Compare against filling every gap with the mean.

    python3 demos/inpaint_sparse.py
"""
import os

import numpy as np
from natural_prior import natural_prior, output_dir
from skimage import data

from patchgibbs import inpaint_config, make_grids, psnr, run_denoise, write_image

clean = data.astronaut().mean(axis=2)[100:164, 200:264, None] / 255.0
observed = np.random.default_rng(3).random(clean.shape) >= 0.95
sigma = 1 / 255
noise = np.where(observed, sigma**2, np.inf)
prior = natural_prior()

mean_fill = np.where(observed, clean, clean[observed].mean())
grids = make_grids(8, 16, seed=0)
data_image = np.where(observed, clean, 0.0)
est_map = run_denoise(data_image, noise, prior, inpaint_config(grids=grids, iterations=50, mode="map")).estimate
est_sample = run_denoise(data_image, noise, prior, inpaint_config(grids=grids, iterations=50)).estimate

print(f"{observed.sum()} of {observed.size} pixels observed")
print(f"mean fill  {psnr(mean_fill, clean):6.2f} dB")
print(f"MAP        {psnr(est_map, clean):6.2f} dB")
print(f"sample     {psnr(np.clip(est_sample, 0, 1), clean):6.2f} dB")

out = output_dir()
write_image(data_image, os.path.join(out, "inpaint_observed.png"))
write_image(est_map, os.path.join(out, "inpaint_map.png"))
write_image(est_sample, os.path.join(out, "inpaint_sample.png"))
