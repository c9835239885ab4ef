import datetime as dt
import math
import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import integrate, stats

from gamcast.deconv import (
    McmcConfig, McmcSamples, PAPER_CONFIG, build_delay_matrix, combine, delay_density,
    infection_profile, point_mass_delay, run_chains, run_mcmc, split_rhat,
)
from gamcast.splines import SmoothSpec

from conftest import make_series

START = dt.date(2020, 3, 1)


def test_delay_parameters():
    d = delay_density(17.8, 71.2, 100)
    assert_allclose(d.shape, 17.8**2 / 71.2, rtol=1e-15)
    assert_allclose(d.shape, 4.45, rtol=1e-14)
    assert_allclose(d.rate, 0.25, rtol=1e-14)


def test_delay_mass_and_mean():
    d = delay_density(17.8, 71.2, 100)
    assert d.gamma_weights.size == 100
    assert np.all(d.gamma_weights >= 0)
    assert 0.9999 <= d.gamma_weights.sum() <= 1.0
    assert abs(d.discrete_mean() - 17.8) < 0.5


def test_delay_weights_match_integrated_density():
    d = delay_density(17.8, 71.2, 60)
    pdf = stats.gamma(a=4.45, scale=4.0).pdf
    want = [integrate.quad(pdf, t - 1, t, epsabs=0, epsrel=1e-12)[0] for t in range(1, 61)]
    assert_allclose(d.gamma_weights, want, rtol=1e-9, atol=1e-15)


@pytest.mark.parametrize("mean, var", [(3.0, 1.0), (10.0, 40.0), (17.8, 71.2)])
def test_delay_mass_with_long_horizon(mean, var):
    horizon = int(math.ceil(mean + 10 * math.sqrt(var)))
    assert delay_density(mean, var, horizon).gamma_weights.sum() >= 0.99


@pytest.mark.parametrize("args", [(0.0, 1.0, 10), (5.0, -1.0, 10), (5.0, 1.0, 0)])
def test_delay_rejects_bad_parameters(args):
    with pytest.raises(ValueError):
        delay_density(*args)


def test_point_mass_gives_identity():
    assert_array_equal(build_delay_matrix(6, point_mass_delay()).B, np.eye(6))


def test_small_delay_matrix():
    w = np.array([0.5, 0.3, 0.2])
    d = type(point_mass_delay())(1.0, 1.0, 3, w)
    B = build_delay_matrix(3, d).B
    assert_array_equal(B, [[0.5, 0, 0], [0.3, 0.5, 0], [0.2, 0.3, 0.5]])


def test_delay_matrix_structure():
    d = delay_density(17.8, 71.2, 40)
    op = build_delay_matrix(50, d, lead_in=15)
    B = op.B
    N = 65
    assert B.shape == (N, N)
    assert op.observed.shape == (50, N)
    for i in range(N):
        for j in range(N):
            want = d.gamma_weights[i - j] if 0 <= i - j < 40 else 0.0
            assert B[i, j] == want
    # away from the right edge every column carries the full delay mass
    assert_allclose(B[:, :N - 40].sum(axis=0), d.gamma_weights.sum(), rtol=1e-14)


def test_config_invariants():
    c = McmcConfig()
    assert (c.iterations, c.thin, c.lead_in) == (100_000, 30, 15)
    assert c.n_kept == (c.iterations - c.burn_in) // c.thin
    assert (PAPER_CONFIG.iterations, PAPER_CONFIG.thin) == (1_000_000, 300)
    for bad in (dict(iterations=10, thin=20), dict(thin=0), dict(iterations=100, burn_in=100),
                dict(family="gaussian"), dict(lead_in=-1)):
        with pytest.raises(ValueError):
            McmcConfig(**bad)


def _truth(n):
    t = np.arange(n)
    return 5 + 195 * np.exp(-0.5 * ((t - 0.5 * n) / (0.15 * n)) ** 2)


@pytest.fixture(scope="module")
def identity_run():
    n = 120
    f = _truth(n)
    y = np.random.default_rng(1).poisson(f)
    cfg = McmcConfig(iterations=30_000, thin=10, seed=5, lead_in=0)
    sm = run_mcmc(make_series(y, START), [SmoothSpec("cubic", 20, "day")], point_mass_delay(), cfg)
    return f, sm, cfg


def test_identity_delay_recovers_truth(identity_run):
    f, sm, _ = identity_run
    p = infection_profile(sm)
    rel = np.abs(p.median - f) / f
    assert np.mean(rel[5:-5] < 0.10) >= 0.90


def test_samples_bookkeeping(identity_run):
    f, sm, cfg = identity_run
    assert sm.n_kept == cfg.n_kept
    assert sm.b.shape == (cfg.n_kept, 20)
    assert sm.rho.shape == (cfg.n_kept, 1)
    assert all(0 < r < 1 for r in sm.acceptance_rate.values())
    assert np.all(sm.theta > 0)
    assert not sm.warning


def test_expected_deaths_nonnegative(identity_run):
    _, sm, _ = identity_run
    B = build_delay_matrix(120, delay_density(17.8, 71.2, 100)).B
    assert np.all(np.exp(sm.log_profiles()) @ B.T >= 0)


def test_mcmc_bit_identical():
    y = np.random.default_rng(2).poisson(_truth(60))
    s = make_series(y, START)
    specs = [SmoothSpec("cubic", 10, "day"), SmoothSpec("cyclic", 6, "dow", 7.0)]
    d = delay_density(17.8, 71.2, 40)
    cfg = McmcConfig(iterations=3000, thin=10, seed=11, lead_in=15)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        a = run_mcmc(s, specs, d, cfg)
        b = run_mcmc(s, specs, d, cfg)
    for name in ("b", "theta", "rho", "log_post"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.acceptance_rate == b.acceptance_rate
    assert a.days[0] == (START - dt.timedelta(days=15) - dt.date(2020, 3, 17)).days
    assert a.b.shape[1] == 10 + 5


def test_poisson_option_and_chains():
    y = np.random.default_rng(3).poisson(_truth(50))
    s = make_series(y, START)
    cfg = McmcConfig(iterations=2000, thin=5, seed=4, family="poisson", lead_in=5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        chains = run_chains(s, [SmoothSpec("cubic", 8, "day")], delay_density(4.0, 4.0, 20),
                            cfg, chains=2)
    assert np.all(np.isinf(chains[0].theta))
    assert "theta" not in chains[0].acceptance_rate
    assert not np.array_equal(chains[0].b, chains[1].b)
    both = combine(chains)
    assert both.n_kept == 2 * cfg.n_kept


def test_large_fixed_lambda_flattens_log_profile():
    y = np.random.default_rng(1).poisson(_truth(120))
    s = make_series(y, START)
    specs = [SmoothSpec("cubic", 20, "day")]
    d = delay_density(17.8, 71.2, 100)

    def curvature(fixed):
        cfg = McmcConfig(iterations=6000, thin=10, seed=3, fixed_log_lambda=fixed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            sm = run_mcmc(s, specs, d, cfg)
        L = sm.log_profiles()
        return np.mean(np.sum(np.diff(L, 2, axis=1) ** 2, axis=1))

    assert curvature((25.0,)) < 1e-4 * curvature(None)


def _samples(b, design_v):
    k = b.shape[0]
    return McmcSamples(b, np.ones(k), np.zeros((k, 1)), {"profile": 0.2},
                       np.arange(design_v.shape[0]), design_v, 0)


def sorted_quantile(x, p):
    """Oracle: linear interpolation between order statistics."""
    xs = np.sort(x)
    h = (xs.size - 1) * p
    lo = int(math.floor(h))
    hi = min(lo + 1, xs.size - 1)
    return xs[lo] + (h - lo) * (xs[hi] - xs[lo])


def test_profile_quantiles_match_sort_oracle():
    rng = np.random.default_rng(0)
    Xv = rng.normal(size=(30, 4))
    b = rng.normal(0.0, 0.3, size=(257, 4))
    p = infection_profile(_samples(b, Xv))
    F = np.exp(b @ Xv.T)
    for arr, q in ((p.band95[0], 0.025), (p.band80[0], 0.10), (p.band50[0], 0.25),
                   (p.median, 0.5), (p.band50[1], 0.75), (p.band80[1], 0.90),
                   (p.band95[1], 0.975)):
        want = np.array([sorted_quantile(F[:, j], q) for j in range(30)])
        assert_allclose(arr, want, rtol=1e-12)
    assert np.all(p.band95[0] <= p.band80[0]) and np.all(p.band80[0] <= p.median)
    assert np.all(p.median <= p.band80[1]) and np.all(p.band80[1] <= p.band95[1])
    assert abs(p.peak_probs.sum() - 1) < 1e-12
    assert np.all(p.median > 0)


def test_flat_profile():
    Xv = np.ones((25, 1))
    b = np.random.default_rng(1).normal(2.0, 0.1, size=(150, 1))
    p = infection_profile(_samples(b, Xv))
    assert_allclose(p.curvature[1:-1], 0, atol=1e-28)
    assert_allclose(p.gradient[1:], 0, atol=1e-12)


def test_log_linear_profile():
    t = np.arange(40.0)
    Xv = np.c_[np.ones(40), t / 10]
    b = np.tile([1.0, 0.4], (120, 1))
    p = infection_profile(_samples(b, Xv))
    assert_allclose(p.curvature[1:-1], 0, atol=1e-24)
    # |f(t) - f(t-1)| = f(t) (1 - e^{-0.04})
    assert_allclose(p.gradient[1:], p.median[1:] * (1 - math.exp(-0.04)), rtol=1e-10)


def test_profile_needs_100_draws():
    with pytest.raises(ValueError):
        infection_profile(_samples(np.zeros((99, 1)), np.ones((5, 1))))


def test_split_rhat():
    rng = np.random.default_rng(0)
    iid = rng.normal(size=(4, 2000))
    assert abs(split_rhat(iid) - 1) < 0.01
    shifted = iid + np.arange(4)[:, None]
    assert split_rhat(shifted) > 1.1
    drift = np.tile(np.linspace(0, 3, 2000), (2, 1)) + rng.normal(size=(2, 2000))
    assert split_rhat(drift) > 1.1
