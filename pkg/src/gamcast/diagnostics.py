"""Residual checks for a fitted model: Q-Q, histogram, scatter panels, ACF."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import family as fam
from .fitting import GamFit

N_REPLICATES = 25


@dataclass(frozen=True, eq=False)
class CheckBundle:
    theoretical: np.ndarray
    observed: np.ndarray
    hist_edges: np.ndarray
    hist_counts: np.ndarray
    eta: np.ndarray
    residuals: np.ndarray
    fitted: np.ndarray
    response: np.ndarray

    @property
    def n(self) -> int:
        return self.observed.size


def reference_quantiles(family: fam.Family, mu, seed, n_rep=N_REPLICATES):
    """Rank-wise mean of sorted deviance residuals of data simulated at ``mu``."""
    rng = np.random.default_rng(seed)
    sims = np.empty((n_rep, mu.size))
    for r in range(n_rep):
        ysim = fam.sample(family, mu, rng)
        sims[r] = np.sort(fam.deviance_residuals(family, ysim, mu))
    return sims.mean(axis=0)


def check_bundle(fit: GamFit, y, seed: int = 0) -> CheckBundle:
    y = np.asarray(y, float)
    if y.shape != fit.fitted.shape:
        raise ValueError("y does not match the fit")
    mu = fit.fitted
    res = fam.deviance_residuals(fit.family, y, mu)
    theo = reference_quantiles(fit.family, mu, seed)
    counts, edges = np.histogram(res, bins="sturges")
    return CheckBundle(theo, np.sort(res), edges, counts, fit.eta, res, mu, y)


@dataclass(frozen=True, eq=False)
class AcfResult:
    lags: np.ndarray
    values: np.ndarray
    band: float

    def significant(self) -> np.ndarray:
        """Lags (excluding 0) whose autocorrelation lies outside the band."""
        out = np.abs(self.values) > self.band
        out[0] = False
        return self.lags[out]


def acf(residuals, max_lag: int | None = None) -> AcfResult:
    x = np.asarray(residuals, float)
    n = x.size
    if max_lag is None:
        max_lag = min(25, n - 1)
    if max_lag < 1 or max_lag >= n:
        raise ValueError(f"max_lag must be in [1, {n - 1}]")
    d = x - x.mean()
    c0 = float(d @ d)
    vals = np.empty(max_lag + 1)
    vals[0] = 1.0
    for k in range(1, max_lag + 1):
        vals[k] = float(d[:-k] @ d[k:]) / c0 if c0 > 0 else 0.0
    return AcfResult(np.arange(max_lag + 1), vals, 1.96 / np.sqrt(n))
