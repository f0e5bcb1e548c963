"""Chi-squared random fields conditioned on a stationary point at the origin."""
from .spectrum import PowerSpectrum, SpectralMoments, effective_kmax, moment, spectral_moments
from .kernels import KernelSet, RadialGrid, build_kernel_set, cached_kernel_set, kernel_functions
from .gaussian_bias import BiasSpec, ZeroAmplitudeError, condition, wick4
from .chi2stats import biased_cov, biased_mean, biased_variance, profile_report
from .sampler import build_mode_laws, draw_sample, lmax_rule, truncation_plan

__version__ = "0.1.0"
