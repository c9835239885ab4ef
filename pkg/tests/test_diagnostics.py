import dataclasses
import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from gamcast import family as fam
from gamcast.data import derive_covariates
from gamcast.diagnostics import acf, check_bundle, reference_quantiles
from gamcast.fitting import fit_gam

from conftest import epidemic_mean, make_series

ANCHOR = dt.date(2020, 3, 17)


@pytest.fixture(scope="module")
def fitted():
    rng = np.random.default_rng(2)
    s = make_series(rng.negative_binomial(5, 5 / (epidemic_mean(146) + 5)))
    fit = fit_gam(derive_covariates(s, ANCHOR), s.deaths, ("trend", "weekly"), fam.negbin(1.0))
    return fit, s.deaths


def test_bundle_shapes_and_consistency(fitted):
    fit, y = fitted
    cb = check_bundle(fit, y, seed=0)
    n = len(y)
    for arr in (cb.theoretical, cb.observed, cb.eta, cb.residuals, cb.fitted, cb.response):
        assert arr.shape == (n,)
    assert cb.hist_counts.sum() == n
    assert_allclose(np.sum(cb.residuals**2), fit.deviance, rtol=1e-10)
    assert np.all(np.diff(cb.observed) >= 0)
    assert np.all(np.diff(cb.theoretical) >= 0)


def test_bundle_deterministic(fitted):
    fit, y = fitted
    a, b = check_bundle(fit, y, seed=4), check_bundle(fit, y, seed=4)
    assert_array_equal(a.theoretical, b.theoretical)


def test_saturated_fit_on_identity_line(fitted):
    fit, y = fitted
    y = np.maximum(y, 1).astype(float)
    sat = dataclasses.replace(fit, fitted=y)
    cb = check_bundle(sat, y, seed=0)
    assert_array_equal(cb.fitted, cb.response)
    assert_allclose(cb.residuals, 0, atol=1e-12)


def test_mismatched_response(fitted):
    fit, y = fitted
    with pytest.raises(ValueError):
        check_bundle(fit, y[:-1])


def test_qq_calibration(fitted):
    fit, _ = fitted
    f, mu = fit.family, fit.fitted
    ref = reference_quantiles(f, mu, seed=11)
    rng = np.random.default_rng(99)

    def gap(ysim):
        return np.max(np.abs(np.sort(fam.deviance_residuals(f, ysim, mu)) - ref))

    null = [gap(fam.sample(f, mu, rng)) for _ in range(200)]
    ystar = fam.sample(f, mu, np.random.default_rng(5))
    assert gap(ystar) < np.percentile(null, 95)


def test_acf_lag_zero_and_bounds():
    x = np.random.default_rng(0).normal(size=80)
    r = acf(x, 20)
    assert r.values[0] == 1.0
    assert np.all(np.abs(r.values) <= 1 + 1e-12)
    assert r.band == 1.96 / np.sqrt(80)
    assert_array_equal(r.lags, np.arange(21))


def test_acf_white_noise():
    x = np.random.default_rng(2024).normal(size=500)
    r = acf(x, 20)
    assert r.significant().size <= 2


def test_acf_alternating():
    n = 200
    x = 3.0 + (-1.0) ** np.arange(n)
    assert abs(acf(x, 5).values[1] + 1) < 2 / n


def test_acf_matches_statsmodels():
    stattools = pytest.importorskip("statsmodels.tsa.stattools")
    x = np.random.default_rng(6).gamma(2.0, size=150)
    assert_allclose(acf(x, 25).values, stattools.acf(x, nlags=25, fft=False), atol=1e-12)


def test_acf_default_and_errors():
    assert acf(np.arange(10.0)).lags[-1] == 9
    assert acf(np.arange(100.0)).lags[-1] == 25
    with pytest.raises(ValueError):
        acf(np.arange(10.0), 10)
    with pytest.raises(ValueError):
        acf(np.arange(10.0), 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=3, max_size=60))
def test_acf_bounded(values):
    x = np.asarray(values)
    r = acf(x, len(x) - 1)
    assert r.values[0] == 1.0
    assert np.all(np.abs(r.values) <= 1 + 1e-12)
