"""Simulation from the Gaussian approximate posterior of a fitted GAM."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .fitting import GamFit

Z95 = 1.959963984540054


@dataclass(frozen=True, eq=False)
class PosteriorDraws:
    samples: np.ndarray
    seed: int
    fit_ref: str = ""


def fit_fingerprint(fit: GamFit) -> str:
    h = hashlib.sha256(fit.beta_hat.tobytes() + fit.V.tobytes())
    return h.hexdigest()[:16]


def rmvn(n_sim: int, mean, cov, seed: int, fit_ref="") -> PosteriorDraws:
    """``n_sim`` draws from N(mean, cov), reproducible for a given seed.

    A non positive definite ``cov`` gets one ridge of ``1e-10 * trace / P``
    before giving up.
    """
    if n_sim < 1:
        raise ValueError("n_sim must be positive")
    mean = np.asarray(mean, float)
    cov = np.asarray(cov, float)
    P = mean.size
    if cov.shape != (P, P):
        raise ValueError("cov does not match mean")
    try:
        L = linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        ridge = 1e-10 * np.trace(cov) / P
        try:
            L = linalg.cholesky(cov + ridge * np.eye(P), lower=True)
        except linalg.LinAlgError:
            raise ValueError("covariance is not positive definite") from None
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_sim, P))
    return PosteriorDraws(mean + z @ L.T, seed, fit_ref)


@dataclass(frozen=True, eq=False)
class SmoothBand:
    term: str
    x: np.ndarray
    mode: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def default_grid(fit: GamFit, term, size=200) -> np.ndarray:
    b = fit.design.blocks[fit.design.term_index(term)]
    if b.spec.kind == "cyclic":
        return np.linspace(0.0, b.spec.period, size)
    k = b.spec.knots
    return np.linspace(k[0], k[-1], size)


def smooth_interval(fit: GamFit, term, grid=None) -> SmoothBand:
    """Posterior mode of one centered smooth with a pointwise 95% band."""
    d = fit.design
    j = d.term_index(term)
    if grid is None:
        grid = default_grid(fit, j)
    grid = np.asarray(grid, float)
    sl = d.term_slice(j)
    Xt = d.blocks[j].evaluate(grid)
    mode = Xt @ fit.beta_hat[sl]
    se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", Xt, fit.V[sl, sl], Xt), 0.0))
    return SmoothBand(d.formula[j], grid, mode, mode - Z95 * se, mode + Z95 * se)


def trend_index(fit: GamFit) -> int:
    for j, b in enumerate(fit.design.blocks):
        if b.spec.kind == "cubic" and b.spec.covariate == "day":
            return j
    raise ValueError("fit has no trend smooth")


def trend_matrix(fit: GamFit) -> np.ndarray:
    """Training model matrix with every column outside intercept and trend zeroed."""
    d = fit.design
    sl = d.term_slice(trend_index(fit))
    Xt = np.zeros_like(d.X)
    Xt[:, 0] = d.X[:, 0]
    Xt[:, sl] = d.X[:, sl]
    return Xt


def trend_days(fit: GamFit) -> np.ndarray:
    return np.asarray(fit.design.cov.day)


def trend_band(fit: GamFit) -> SmoothBand:
    """Intercept-plus-trend curve on the response scale with a 95% band."""
    Xt = trend_matrix(fit)
    eta = Xt @ fit.beta_hat
    se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", Xt, fit.V, Xt), 0.0))
    return SmoothBand("trend", trend_days(fit), np.exp(eta), np.exp(eta - Z95 * se),
                      np.exp(eta + Z95 * se))


@dataclass(frozen=True, eq=False)
class PeakDistribution:
    days: np.ndarray
    day_probabilities: np.ndarray
    mode_day: int
    interval_95: tuple
    n_sim: int
    seed: int


def equal_tailed(days, probs, mode_day, level=0.95):
    cdf = np.cumsum(probs)
    a = (1.0 - level) / 2.0
    lo = days[min(np.searchsorted(cdf, a - 1e-12), days.size - 1)]
    hi = days[min(np.searchsorted(cdf, 1.0 - a - 1e-12), days.size - 1)]
    return int(min(lo, mode_day)), int(max(hi, mode_day))


def peak_from_curves(curves, days, n_sim, seed) -> PeakDistribution:
    idx = np.argmax(curves, axis=1)
    counts = np.bincount(idx, minlength=days.size)
    probs = counts / counts.sum()
    mode_day = int(days[np.argmax(probs)])
    return PeakDistribution(days, probs, mode_day, equal_tailed(days, probs, mode_day), n_sim, seed)


def peak_distribution(fit: GamFit, n_sim: int = 10_000, seed: int = 0) -> PeakDistribution:
    """Distribution of the day on which the underlying trend peaks.

    Each posterior coefficient draw gives one trend curve over the observed
    days; its argmax (first one on ties) is tallied.
    """
    if n_sim < 100:
        raise ValueError("n_sim below 100 is too noisy to report")
    Xt = trend_matrix(fit)
    draws = rmvn(n_sim, fit.beta_hat, fit.V, seed, fit_fingerprint(fit))
    curves = draws.samples @ Xt.T
    days = trend_days(fit)
    return peak_from_curves(curves, days, n_sim, seed)
