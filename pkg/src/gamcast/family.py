"""Poisson and negative binomial response families with log link.

The negative binomial has mean ``mu`` and variance ``mu + mu**2 / theta``.
Everything is computed in log space so counts up to ~1e6 are safe.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special


@dataclass(frozen=True)
class Family:
    kind: str = "negbin"
    theta: float | None = None

    def __post_init__(self):
        if self.kind not in ("poisson", "negbin"):
            raise ValueError(f"unknown family {self.kind!r}")
        if self.kind == "negbin":
            if self.theta is None or not np.isfinite(self.theta) or self.theta <= 0:
                raise ValueError("negative binomial needs a finite theta > 0")

    @property
    def is_negbin(self) -> bool:
        return self.kind == "negbin"

    def with_theta(self, theta) -> "Family":
        return Family(self.kind, float(theta)) if self.is_negbin else self


def poisson() -> Family:
    return Family("poisson")


def negbin(theta) -> Family:
    return Family("negbin", float(theta))


def _check(y, mu):
    y = np.asarray(y, float)
    mu = np.asarray(mu, float)
    if y.shape != mu.shape:
        raise ValueError(f"y has shape {y.shape} but mu has shape {mu.shape}")
    if np.any(mu <= 0) or not np.all(np.isfinite(mu)):
        raise ValueError("mu must be finite and positive")
    return y, mu


def variance(family: Family, mu):
    mu = np.asarray(mu, float)
    if np.any(mu <= 0):
        raise ValueError("mu must be positive")
    if family.is_negbin:
        return mu + mu**2 / family.theta
    return mu


def loglik_terms(family: Family, y, mu):
    """Pointwise log-probabilities; ``mu`` may be zero where ``y`` is zero."""
    y = np.asarray(y, float)
    mu = np.asarray(mu, float)
    if family.is_negbin:
        th = family.theta
        # theta*log(theta/(mu+theta)) written via log1p for large theta
        return (special.gammaln(y + th) - special.gammaln(th) - special.gammaln(y + 1.0)
                - th * np.log1p(mu / th) + special.xlogy(y, mu) - y * np.log(mu + th))
    return special.xlogy(y, mu) - mu - special.gammaln(y + 1.0)


def log_likelihood(family: Family, y, mu) -> float:
    y, mu = _check(y, mu)
    ll = float(np.sum(loglik_terms(family, y, mu)))
    if not np.isfinite(ll):
        raise FloatingPointError("non-finite log-likelihood")
    return ll


def unit_deviance(family: Family, y, mu):
    y, mu = _check(y, mu)
    ylogy = special.xlogy(y, y) - special.xlogy(y, mu)
    if family.is_negbin:
        th = family.theta
        r = (y - mu) / (mu + th)
        # log1p keeps precision for large theta; the plain ratio is exact far from 1
        with np.errstate(divide="ignore", invalid="ignore"):
            lr = np.where(r > -0.5, np.log1p(np.maximum(r, -0.5)), np.log(y + th) - np.log(mu + th))
        d = 2.0 * (ylogy - (y + th) * lr)
    else:
        d = 2.0 * (ylogy - (y - mu))
    return np.maximum(d, 0.0)


def deviance(family: Family, y, mu) -> float:
    return float(np.sum(unit_deviance(family, y, mu)))


def deviance_residuals(family: Family, y, mu):
    y, mu = _check(y, mu)
    return np.sign(y - mu) * np.sqrt(unit_deviance(family, y, mu))


# Log-link derivatives used by the fitting code. ``w`` is the negative second
# derivative of the log-likelihood in eta, which is positive for both families.

def score_eta(family: Family, y, mu):
    if family.is_negbin:
        th = family.theta
        return th * (y - mu) / (mu + th)
    return y - mu


def weight_eta(family: Family, y, mu):
    if family.is_negbin:
        th = family.theta
        return th * mu * (y + th) / (mu + th) ** 2
    return mu


def dweight_deta(family: Family, y, mu):
    if family.is_negbin:
        th = family.theta
        return th * (y + th) * mu * (th - mu) / (mu + th) ** 3
    return mu


def dloglik_dtheta(family: Family, y, mu):
    th = family.theta
    return (special.digamma(y + th) - special.digamma(th) + np.log(th) + 1.0
            - np.log(mu + th) - (y + th) / (mu + th))


def dscore_dtheta(family: Family, y, mu):
    th = family.theta
    return (y - mu) * mu / (mu + th) ** 2


def dweight_dtheta(family: Family, y, mu):
    th = family.theta
    return mu * (y * mu - y * th + 2.0 * th * mu) / (mu + th) ** 3


def sample(family: Family, mu, rng):
    """Draw counts with mean ``mu`` from ``family``."""
    mu = np.asarray(mu, float)
    if family.is_negbin:
        th = family.theta
        return rng.negative_binomial(th, th / (mu + th))
    return rng.poisson(mu)
