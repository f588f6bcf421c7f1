"""Diffusion-guided learning of compressed-sensing MRI sampling patterns."""

from .baselines import equispaced_mask, poisson_disc_mask
from .denoiser import DenoiserConfig, DenoiserNet, conv_image_preset, train_denoiser
from .masks import MaskParams, TrainConfig, learn_mask, renormalize_probs, sample_mask, top_mask
from .metrics import psnr, ssim
from .mri import LINE, POINT, BinaryMask, CoilSet, acceleration, adjoint, forward, make_coils
from .phantoms import PhantomSpec, gen_phantom, make_dataset, scale_to_range
from .protocols import DESK_ACS, DESK_RHO, EvalConfig, central_fraction, evaluate_mask, train_and_compare
from .posterior import SamplerConfig, posterior_mean, sample_posterior, tweedie_denoise
from .scores import GmmPrior, NoiseSchedule, SigmaSampler
from .tensor import fft2c, ifft2c, make_rng

__version__ = "0.1.0"
