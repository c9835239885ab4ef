"""Penalized-spline GAMs for daily count series, with peak inference and deconvolution."""
from .data import DailySeries, DataError, derive_covariates, load_series
from .deconv import McmcConfig, build_delay_matrix, delay_density, infection_profile, run_mcmc
from .family import Family, negbin, poisson
from .fitting import GamFit, assemble_design, default_specs, fit_gam, optimize
from .posterior import peak_distribution, rmvn, smooth_interval
from .splines import SmoothSpec, smooth_basis

__version__ = "0.1.0"

__all__ = [
    "DailySeries", "DataError", "derive_covariates", "load_series",
    "McmcConfig", "build_delay_matrix", "delay_density", "infection_profile", "run_mcmc",
    "Family", "negbin", "poisson",
    "GamFit", "assemble_design", "default_specs", "fit_gam", "optimize",
    "peak_distribution", "rmvn", "smooth_interval",
    "SmoothSpec", "smooth_basis",
]
