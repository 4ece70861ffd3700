"""Posterior sampling for linear image restoration with patch priors."""
from .degradation import (
    Convolution,
    GaussianKernelSpec,
    Identity,
    LinearOperator,
    Mask,
    apply,
    apply_adjoint,
    build_gaussian_kernel,
    load_kernel,
    sample_data_gaussian,
)
from .errors import FormatError, InvalidArgument, NumericalFailure
from .image import (
    GridSet,
    GridSpec,
    as_image,
    assemble_grid_patches,
    crop,
    extract_grid_patches,
    make_grids,
    pad_reflect,
    psnr,
)
from .model_io import load_prior, read_image, save_prior, write_image
from .priors import (
    DictionaryPrior,
    GmmPrior,
    PatchPrior,
    gmm_posterior_moments,
    gmm_responsibilities,
    log_density,
    map_patch_posterior,
    sample_patch_posterior,
    sample_prior,
    train_gmm_em,
)
from .sampler import (
    RestorationResult,
    SamplerConfig,
    Schedule,
    data_weight,
    deblur_config,
    denoise_config,
    epll_energy,
    inpaint_config,
    mmse_estimate,
    run_denoise,
    run_restore,
    schedule_eval,
)

__version__ = "0.1.0"
