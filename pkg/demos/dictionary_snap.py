"""A dictionary prior forces every output patch onto a stored atom.

Build the dictionary from all patches of the clean image, add noise and run
the chain. Once the coupling between grids is strong, each grid's patches
are atoms and the grids agree, so every configured grid of the output is
tiled by atoms. Here that recovers the clean crop outright.

    python3 demos/dictionary_snap.py
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from skimage import data

from patchgibbs import DictionaryPrior, denoise_config, make_grids, pad_reflect, psnr, run_denoise

p = 8
clean = data.camera()[300:364, 200:264] / 255.0
atoms = sliding_window_view(pad_reflect(clean[:, :, None], p)[:, :, 0], (p, p)).reshape(-1, p * p)
prior = DictionaryPrior(atoms, p)
sigma = 15 / 255
noisy = clean + sigma * np.random.default_rng(4).standard_normal(clean.shape)

for n_grids in (8, 32):
    cfg = denoise_config(sigma, iterations=50, grids=make_grids(p, n_grids, seed=0))
    out = run_denoise(noisy, sigma**2, prior, cfg).estimate[:, :, 0]
    worst = 0.0
    for grid in cfg.grids:
        oy, ox = grid.offset
        rows = [out[a:a + p, b:b + p].ravel() for a in range(oy, 64 - p + 1, p) for b in range(ox, 64 - p + 1, p)]
        worst = max(worst, prior.nearest_atom_distance(np.array(rows)).max())
    print(f"G={n_grids:2d}: PSNR {psnr(out, clean):6.2f} dB, worst distance to an atom {worst:.4f}")
# with few grids some offsets never get a say and disagreements survive the final pass
