import datetime as dt

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from gamcast import family as fam
from gamcast.data import derive_covariates
from gamcast.fitting import fit_gam
from gamcast.posterior import (
    equal_tailed, peak_distribution, rmvn, smooth_interval, trend_band, trend_matrix,
)

from conftest import make_series
from simstudy import coverage_study

ANCHOR = dt.date(2020, 3, 17)


def test_rmvn_standard_normal():
    d = rmvn(100_000, np.zeros(4), np.eye(4), seed=1).samples
    v = d.var(axis=0)
    assert np.all((v >= 0.98) & (v <= 1.02))


def test_rmvn_deterministic():
    a = rmvn(500, np.ones(3), np.diag([1.0, 2.0, 3.0]), seed=42)
    b = rmvn(500, np.ones(3), np.diag([1.0, 2.0, 3.0]), seed=42)
    assert a.samples.tobytes() == b.samples.tobytes()
    c = rmvn(500, np.ones(3), np.diag([1.0, 2.0, 3.0]), seed=43)
    assert not np.array_equal(a.samples, c.samples)


def test_rmvn_moments_within_monte_carlo_error():
    C = np.array([[2.0, 0.6, -0.3], [0.6, 1.0, 0.2], [-0.3, 0.2, 0.5]])
    m = np.array([1.0, -2.0, 0.5])
    n = 100_000
    x = rmvn(n, m, C, seed=7).samples
    se_mean = np.sqrt(np.diag(C) / n)
    assert np.all(np.abs(x.mean(axis=0) - m) < 3 * se_mean)
    se_cov = np.sqrt((np.outer(np.diag(C), np.diag(C)) + C**2) / n)
    assert np.all(np.abs(np.cov(x, rowvar=False) - C) < 3 * se_cov)


def test_rmvn_ridge_and_rejection():
    # singular PSD passes after the ridge
    v = np.array([1.0, 1.0])
    d = rmvn(10, np.zeros(2), np.outer(v, v), seed=0)
    assert d.samples.shape == (10, 2)
    with pytest.raises(ValueError):
        rmvn(10, np.zeros(2), np.array([[1.0, 0.0], [0.0, -1.0]]), seed=0)
    with pytest.raises(ValueError):
        rmvn(0, np.zeros(2), np.eye(2), seed=0)


@pytest.fixture(scope="module")
def hump_fit():
    # symmetric hump at day 30 of 61, weekly cycle, modest noise
    rng = np.random.default_rng(5)
    t = np.arange(61)
    d = np.array([(ANCHOR + dt.timedelta(days=int(i))).isoweekday() for i in t])
    mu = np.exp(3.0 + 1.2 * np.exp(-0.5 * ((t - 30) / 9.0) ** 2) + 0.2 * np.sin(2 * np.pi * d / 7))
    s = make_series(rng.poisson(mu), start=ANCHOR)
    return fit_gam(derive_covariates(s, ANCHOR), s.deaths, ("trend", "weekly"), fam.poisson())


def test_peak_of_symmetric_hump(hump_fit):
    pk = peak_distribution(hump_fit, 10_000, seed=3)
    assert abs(pk.mode_day - 30) <= 1
    lo, hi = pk.interval_95
    assert abs((30 - lo) - (hi - 30)) <= 2
    assert lo <= pk.mode_day <= hi
    assert abs(pk.day_probabilities.sum() - 1) < 1e-12
    assert np.all(pk.day_probabilities >= 0)


def test_peak_deterministic(hump_fit):
    a = peak_distribution(hump_fit, 2000, seed=9)
    b = peak_distribution(hump_fit, 2000, seed=9)
    assert_array_equal(a.day_probabilities, b.day_probabilities)
    assert (a.mode_day, a.interval_95) == (b.mode_day, b.interval_95)


def test_peak_rejects_small_nsim(hump_fit):
    with pytest.raises(ValueError):
        peak_distribution(hump_fit, 99)


def test_increasing_trend_peaks_on_last_day():
    t = np.arange(40)
    y = np.round(np.exp(6.0 + t / 12.0)).astype(int)
    s = make_series(y, start=ANCHOR)
    fit = fit_gam(derive_covariates(s, ANCHOR), y, ("trend",), fam.poisson())
    pk = peak_distribution(fit, 1000, seed=0)
    assert pk.day_probabilities[-1] == 1.0
    assert pk.mode_day == 39


def test_trend_plus_cyclic_equals_full_prediction(hump_fit):
    f = hump_fit
    draws = rmvn(200, f.beta_hat, f.V, seed=1).samples
    Xt = trend_matrix(f)
    Xc = f.design.X - Xt
    assert np.max(np.abs(draws @ Xt.T + draws @ Xc.T - draws @ f.design.X.T)) < 1e-10
    # argmax is the same on link and response scale for every draw
    link = draws @ Xt.T
    assert_array_equal(np.argmax(link, axis=1), np.argmax(np.exp(link), axis=1))


def test_smooth_interval_bands(hump_fit):
    for term in ("trend", "weekly"):
        b = smooth_interval(hump_fit, term)
        assert np.all(b.upper - b.lower > 0)
        assert np.all((b.lower < b.mode) & (b.mode < b.upper))
    w = smooth_interval(hump_fit, "weekly", np.array([0.0, 7.0]))
    for arr in (w.mode, w.lower, w.upper):
        assert abs(arr[0] - arr[1]) < 1e-8
    with pytest.raises(KeyError):
        smooth_interval(hump_fit, "monthly")


def test_trend_band_is_positive(hump_fit):
    b = trend_band(hump_fit)
    assert np.all(b.lower > 0) and np.all(b.lower < b.mode) and np.all(b.mode < b.upper)
    assert_array_equal(b.x, np.arange(61))


def test_equal_tailed_includes_mode():
    days = np.arange(5)
    probs = np.array([0.0, 0.0, 0.0, 0.01, 0.99])
    assert equal_tailed(days, probs, 4) == (4, 4)
    # a mode sitting in a thin tail still ends up inside the interval
    flat = np.array([0.04] + [0.96 / 4] * 4)
    assert equal_tailed(days, flat, 0) == (0, 4)
    assert equal_tailed(days, np.array([0.02, 0.02, 0.32, 0.32, 0.32]), 0) == (0, 4)
    assert equal_tailed(days, np.array([0.9, 0.1, 0, 0, 0]), 0)[0] == 0


def test_small_coverage_study():
    bands, peaks = coverage_study(n_rep=25)
    assert bands["trend"] >= 0.85 and bands["weekly"] >= 0.85
    assert peaks >= 0.85
