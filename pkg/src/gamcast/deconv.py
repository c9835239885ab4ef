"""Back-calculation of the fatal-infection profile from daily deaths.

Expected deaths are ``h = B f`` where ``f`` is the daily number of
eventually-fatal infections and ``B`` spreads each day's infections over the
following days with a discretized gamma onset-to-death delay. The log
profile is a cubic regression spline with a second-derivative smoothness
prior; calendar cycles multiply ``h`` on the log scale. The posterior is
explored by Metropolis-within-Gibbs:

* adaptive random-walk Metropolis for the profile coefficients, the cyclic
  coefficients and log theta (one block each), with Laplace-shaped
  proposals whose scale is tuned during burn-in and then frozen;
* conjugate gamma draws for each smoothing precision.
"""
from __future__ import annotations

import datetime as dt
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize as spopt, special, stats

from . import family as fam
from .data import DailySeries, covariates_for_dates
from .fitting import FitError, assemble_design, build_fit, initial_hyper, optimize as fit_optimize
from .splines import SmoothSpec, apply_centering, smooth_basis

DEFAULT_ANCHOR = dt.date(2020, 3, 17)
TARGET_ACCEPT = 0.23
THETA_BOUNDS = (-15.0, 15.0)


@dataclass(frozen=True, eq=False)
class DiscretizedDelay:
    mean: float
    variance: float
    horizon: int
    gamma_weights: np.ndarray

    @property
    def shape(self) -> float:
        return self.mean**2 / self.variance

    @property
    def rate(self) -> float:
        return self.mean / self.variance

    def discrete_mean(self) -> float:
        lags = np.arange(1, self.horizon + 1)
        return float(lags @ self.gamma_weights)


def delay_density(mean: float, variance: float, horizon: int = 100) -> DiscretizedDelay:
    """Gamma delay with the given moments, as probability mass per whole-day lag.

    ``gamma_weights[t - 1] = CDF(t) - CDF(t - 1)`` for ``t = 1..horizon``.
    """
    if not (mean > 0 and variance > 0):
        raise ValueError("delay mean and variance must be positive")
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    shape, rate = mean**2 / variance, mean / variance
    cdf = stats.gamma.cdf(np.arange(horizon + 1), a=shape, scale=1.0 / rate)
    w = np.diff(cdf)
    w.setflags(write=False)
    return DiscretizedDelay(float(mean), float(variance), int(horizon), w)


def point_mass_delay() -> DiscretizedDelay:
    """Degenerate delay putting all mass on the same-day lag (``B = I``)."""
    w = np.array([1.0])
    w.setflags(write=False)
    return DiscretizedDelay(1.0, 0.0, 1, w)


@dataclass(frozen=True, eq=False)
class DelayOperator:
    B: np.ndarray
    lead_in: int

    @property
    def observed(self) -> np.ndarray:
        """Rows of ``B`` for days with observed deaths."""
        return self.B[self.lead_in:]


def build_delay_matrix(n: int, delay: DiscretizedDelay, lead_in: int = 0) -> DelayOperator:
    """Lower-triangular Toeplitz ``B`` of order ``n + lead_in``, ``B[i, j] = gamma(i - j + 1)``."""
    if n < 1 or lead_in < 0:
        raise ValueError("need n >= 1 and lead_in >= 0")
    N = n + lead_in
    col = np.zeros(N)
    m = min(N, delay.gamma_weights.size)
    col[:m] = delay.gamma_weights[:m]
    B = linalg.toeplitz(col, np.zeros(N))
    B.setflags(write=False)
    return DelayOperator(B, int(lead_in))


@dataclass(frozen=True)
class McmcConfig:
    iterations: int = 100_000
    thin: int = 30
    burn_in: int | None = None
    seed: int = 0
    ridge: float = 1e-6
    family: str = "negbin"
    lead_in: int = 15
    fixed_log_lambda: tuple | None = None

    def __post_init__(self):
        if self.burn_in is None:
            object.__setattr__(self, "burn_in", self.iterations // 5)
        if not (self.iterations >= self.thin >= 1):
            raise ValueError("need iterations >= thin >= 1")
        if not (0 <= self.burn_in < self.iterations):
            raise ValueError("burn_in must lie in [0, iterations)")
        if self.family not in ("negbin", "poisson"):
            raise ValueError("family must be 'negbin' or 'poisson'")
        if self.lead_in < 0:
            raise ValueError("lead_in must be non-negative")

    @property
    def n_kept(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


PAPER_CONFIG = McmcConfig(iterations=1_000_000, thin=300)


@dataclass(frozen=True, eq=False)
class McmcSamples:
    b: np.ndarray
    theta: np.ndarray
    rho: np.ndarray
    acceptance_rate: dict
    days: np.ndarray
    design_v: np.ndarray
    seed: int
    warning: bool = False
    smooth_names: tuple = ()
    log_post: np.ndarray = field(default=None, repr=False)

    @property
    def n_kept(self) -> int:
        return self.b.shape[0]

    @property
    def n_profile(self) -> int:
        return self.design_v.shape[1]

    def log_profiles(self) -> np.ndarray:
        return self.b[:, :self.n_profile] @ self.design_v.T


class _Model:
    """Log posterior of the deconvolution model, split by parameter block.

    Penalties are handled in the eigenbasis of each ``S``: quadratic forms
    become weighted sums of squares, which stay accurate when a smoothing
    parameter is huge and the posterior is extremely narrow.
    """

    def __init__(self, y, Xv, Sv, Bobs, Xw, Sw, slices_w, negbin, ridge):
        self.y = y
        self.Xv, self.Bobs = Xv, Bobs
        self.Xw, self.slices_w = Xw, slices_w
        self.negbin = negbin
        self.kv = Xv.shape[1]
        self.kw = Xw.shape[1]
        self.ridge = ridge
        self.Tv, self.dv, self.nullv = self._eig(Sv)
        self.rank_v = int(np.sum(~self.nullv))
        self.Tw = np.zeros((self.kw, self.kw))
        self.dw = np.zeros(self.kw)
        self.nullw = np.zeros(self.kw, bool)
        self.rank_w = []
        for sl, S in zip(slices_w, Sw):
            T, d, null = self._eig(S)
            self.Tw[sl, sl], self.dw[sl], self.nullw[sl] = T, d, null
            self.rank_w.append(int(np.sum(~null)))
        self.sum_lgy1 = float(np.sum(special.gammaln(y + 1.0)))

    @staticmethod
    def _eig(S):
        d, T = linalg.eigh(S)
        null = d <= 1e-10 * d.max()
        return T, np.where(null, 0.0, d), null

    def profile(self, bv):
        with np.errstate(over="ignore"):
            return np.exp(self.Xv @ bv)

    def cyclic(self, bw):
        if self.kw == 0:
            return np.ones(self.y.size)
        return np.exp(self.Xw @ bw)

    def expected(self, bv, bw):
        return (self.Bobs @ self.profile(bv)) * self.cyclic(bw)

    def loglik(self, m, theta):
        y = self.y
        if not np.all(np.isfinite(m)) or np.any(m <= 0):
            return -np.inf
        if self.negbin:
            n = y.size
            ll = (float(np.sum(special.gammaln(y + theta))) - n * special.gammaln(theta)
                  + n * theta * math.log(theta)
                  + float(np.sum(special.xlogy(y, m) - (y + theta) * np.log(m + theta)))
                  - self.sum_lgy1)
        else:
            ll = float(np.sum(special.xlogy(y, m) - m)) - self.sum_lgy1
        return ll if math.isfinite(ll) else -np.inf

    # prior precision in the eigenbasis, as a diagonal
    def prec_v(self, lam_v):
        return lam_v * self.dv + self.ridge * self.nullv

    def prec_w(self, lam_w):
        out = self.ridge * self.nullw.astype(float)
        for sl, l in zip(self.slices_w, lam_w):
            out[sl] += l * self.dw[sl]
        return out

    def penalty_v(self, bv):
        """``bv' S_v bv`` without the ridge."""
        z = self.Tv.T @ bv
        return float(np.sum(self.dv * z**2))

    def penalty_w(self, bw, j):
        sl = self.slices_w[j]
        z = self.Tw[sl, sl].T @ bw[sl]
        return float(np.sum(self.dw[sl] * z**2))

    def prior_v(self, bv, lam_v):
        z = self.Tv.T @ bv
        return -0.5 * float(np.sum(self.prec_v(lam_v) * z**2))

    def prior_w(self, bw, lam_w):
        if self.kw == 0:
            return 0.0
        z = self.Tw.T @ bw
        return -0.5 * float(np.sum(self.prec_w(lam_w) * z**2))

    def _weights(self, x):
        bv, bw, tau = self.split(x)
        theta = math.exp(tau) if self.negbin else None
        f = self.profile(bv)
        ew = self.cyclic(bw)
        m = (self.Bobs @ f) * ew
        w = theta / (m * (m + theta)) if self.negbin else 1.0 / m
        return f, ew, m, w

    def information(self, x, lam_v, lam_w):
        """Fisher information plus prior precision per block, in the eigenbases.

        Returns ``(Hv, Hw, ht)``; log theta gets a central difference of
        its score.
        """
        f, ew, m, w = self._weights(x)
        Jv = (ew[:, None] * self.Bobs) @ (f[:, None] * self.Xv) @ self.Tv
        Hv = Jv.T @ (w[:, None] * Jv) + np.diag(self.prec_v(lam_v))
        Hw = None
        if self.kw:
            Jw = (m[:, None] * self.Xw) @ self.Tw
            Hw = Jw.T @ (w[:, None] * Jw) + np.diag(self.prec_w(lam_w))
        ht = None
        if self.negbin:
            i = self.kv + self.kw
            eps = 1e-4
            e = np.zeros_like(x)
            e[i] = eps
            ht = (self.neg_log_post(x + e, lam_v, lam_w)[1][i]
                  - self.neg_log_post(x - e, lam_v, lam_w)[1][i]) / (2 * eps)
        return Hv, Hw, ht

    def joint_information(self, x, lam_v, lam_w):
        """Fisher information plus prior precision for ``(bv, bw)`` in the joint eigenbasis."""
        f, ew, m, w = self._weights(x)
        J = np.hstack([(ew[:, None] * self.Bobs) @ (f[:, None] * self.Xv) @ self.Tv,
                       (m[:, None] * self.Xw) @ self.Tw])
        I = J.T @ (w[:, None] * J)
        I[np.diag_indices_from(I)] += np.r_[self.prec_v(lam_v), self.prec_w(lam_w)]
        return I

    @property
    def basis(self):
        return linalg.block_diag(self.Tv, self.Tw)

    # joint vector x = (bv, bw, log theta) for mode finding
    def split(self, x):
        bv = x[:self.kv]
        bw = x[self.kv:self.kv + self.kw]
        tau = x[self.kv + self.kw] if self.negbin else None
        return bv, bw, tau

    def neg_log_post(self, x, lam_v, lam_w):
        bv, bw, tau = self.split(x)
        theta = math.exp(tau) if self.negbin else None
        f = self.profile(bv)
        h = self.Bobs @ f
        ew = self.cyclic(bw)
        m = h * ew
        ll = self.loglik(m, theta)
        if not math.isfinite(ll):
            return 1e100, np.zeros_like(x)
        val = ll + self.prior_v(bv, lam_v) + self.prior_w(bw, lam_w)
        y = self.y
        if self.negbin:
            dm = y / m - (y + theta) / (m + theta)
        else:
            dm = y / m - 1.0
        gv = (self.Xv.T @ (f * (self.Bobs.T @ (ew * dm)))
              - self.Tv @ (self.prec_v(lam_v) * (self.Tv.T @ bv)))
        parts = [gv]
        if self.kw:
            gw = self.Xw.T @ (m * dm) - self.Tw @ (self.prec_w(lam_w) * (self.Tw.T @ bw))
            parts.append(gw)
        if self.negbin:
            fth = fam.Family("negbin", theta)
            parts.append([theta * float(np.sum(fam.dloglik_dtheta(fth, y, m)))])
        return -val, -np.concatenate([np.atleast_1d(p) for p in parts])


def _scaled_cholesky(P):
    """Lower Cholesky factor of ``P`` after symmetric diagonal scaling, and the scales."""
    P = (P + P.T) / 2.0
    D = np.sqrt(np.maximum(np.diag(P), 1e-300))
    return linalg.cholesky(P / np.outer(D, D), lower=True), D


def _setup(series: DailySeries, specs, delay, config, anchor):
    specs = list(specs)
    if not specs or specs[0].kind != "cubic":
        raise ValueError("first smooth must be the cubic infection-profile smooth")
    n, L = len(series), config.lead_in
    first = series.first - dt.timedelta(days=L)
    ext_dates = [first + dt.timedelta(days=i) for i in range(n + L)]
    cov_ext = covariates_for_dates(ext_dates, anchor, start=series.first)
    cov_obs = cov_ext.slice(slice(L, None))
    vb = smooth_basis(cov_ext.column(specs[0].covariate), specs[0])
    blocks_w = [apply_centering(smooth_basis(cov_obs.column(s.covariate), s)) for s in specs[1:]]
    if blocks_w:
        Xw = np.hstack([b.design for b in blocks_w])
    else:
        Xw = np.zeros((n, 0))
    slices, off = [], 0
    for b in blocks_w:
        slices.append(slice(off, off + b.width))
        off += b.width
    op = build_delay_matrix(n, delay, L)
    model = _Model(series.deaths.astype(float), vb.design, vb.penalty, np.array(op.observed),
                   Xw, [b.penalty for b in blocks_w], slices, config.family == "negbin", config.ridge)
    return model, cov_ext, cov_obs, vb, blocks_w


def _initial_state(model: _Model, series, specs, delay, cov_ext, cov_obs, config):
    """Posterior mode at smoothing parameters taken from an ordinary GAM fit."""
    y = model.y
    L = config.lead_in
    # a GAM on the deaths gives starting smoothness and dispersion
    obs_specs = [SmoothSpec("cubic", specs[0].rank, specs[0].covariate, label="trend")]
    obs_specs += [SmoothSpec(s.kind, s.rank, s.covariate, s.period, s.knots, s.label) for s in specs[1:]]
    design = assemble_design(cov_obs, obs_specs)
    family = fam.negbin(10.0) if model.negbin else fam.poisson()
    try:
        gam = fit_optimize(design, family, y)
    except FitError:
        gam = build_fit(design, family, initial_hyper(design, family, y), y)
    lam = np.exp(np.array(gam.hyper.log_lambda)) / np.array(design.penalty_scale)
    lam_v, lam_w = float(lam[0]), [float(v) for v in lam[1:]]
    if config.fixed_log_lambda is not None:
        fixed = np.exp(np.asarray(config.fixed_log_lambda, float))
        lam_v, lam_w = float(fixed[0]), [float(v) for v in fixed[1:]]
    # shift the fitted death-rate trend back by the mean delay for a first profile guess
    sl = design.term_slice(0)
    trend = gam.beta_hat[0] + design.X[:, sl] @ gam.beta_hat[sl]
    lag = int(round(delay.discrete_mean())) - 1 if delay.horizon > 1 else 0
    days_obs = cov_obs.day
    target_days = cov_ext.day + lag
    guess = np.interp(target_days, days_obs, trend) - math.log(max(delay.gamma_weights.sum(), 1e-3))
    bv0 = linalg.lstsq(model.Xv, guess)[0]
    bw0 = np.zeros(model.kw)
    for j, sl_w in enumerate(model.slices_w):
        # map the fitted cyclic effect onto the sampler's basis
        dsl = design.term_slice(j + 1)
        bw0[sl_w] = gam.beta_hat[dsl]
    x0 = np.concatenate([bv0, bw0] + ([[gam.hyper.log_theta]] if model.negbin else []))
    bounds = [(None, None)] * (model.kv + model.kw)
    if model.negbin:
        bounds.append(THETA_BOUNDS)
    res = spopt.minimize(model.neg_log_post, x0, args=(lam_v, lam_w), jac=True,
                         method="L-BFGS-B", bounds=bounds,
                         options={"maxiter": 2000, "ftol": 1e-13, "gtol": 1e-8})
    return _polish(model, res.x, lam_v, lam_w), lam_v, lam_w


def _polish(model: _Model, x, lam_v, lam_w, max_iter=100):
    """Damped Fisher scoring on the coefficients, alternating with log theta.

    Quasi-Newton alone stalls when a huge fixed smoothing parameter makes
    the posterior very ill-conditioned; scoring steps do not.
    """
    x = x.copy()
    k = model.kv + model.kw
    T = model.basis
    val, grad = model.neg_log_post(x, lam_v, lam_w)
    for _ in range(max_iter):
        I = model.joint_information(x, lam_v, lam_w)
        try:
            R, D = _scaled_cholesky(I)
        except linalg.LinAlgError:
            break
        g = (T.T @ -grad[:k]) / D
        step = T @ (linalg.cho_solve((R, True), g) / D)
        t = 1.0
        while t > 1e-10:
            trial = x.copy()
            trial[:k] += t * step
            tv, tg = model.neg_log_post(trial, lam_v, lam_w)
            if tv <= val:
                break
            t /= 2.0
        else:
            break
        decrease = val - tv
        x, val, grad = trial, tv, tg
        if model.negbin:
            i = k

            def nlp_tau(tau):
                z = x.copy()
                z[i] = tau
                return model.neg_log_post(z, lam_v, lam_w)[0]

            r = spopt.minimize_scalar(nlp_tau, bounds=THETA_BOUNDS, method="bounded",
                                      options={"xatol": 1e-8})
            if r.fun < val:
                x[i] = r.x
                val, grad = model.neg_log_post(x, lam_v, lam_w)
        if decrease < 1e-10 * (1.0 + abs(val)):
            break
    return x


class _Block:
    """Random-walk proposal ``x + s * M z`` with adaptive log scale ``s``.

    ``M`` factors the inverse of a precision given in an orthonormal basis
    ``T``, so ``M M' = T P^-1 T'``.
    """

    def __init__(self, precision, basis, rng):
        self.d = precision.shape[0]
        self.basis = basis
        self.set_precision(precision)
        self.log_scale = math.log(2.38 / math.sqrt(self.d))
        self.rng = rng
        self.accepted = 0
        self.proposed = 0

    def set_precision(self, precision):
        R, D = _scaled_cholesky(precision)
        Rinv = linalg.solve_triangular(R, np.eye(self.d), lower=True)
        self.chol = self.basis @ (Rinv.T / D[:, None])

    def propose(self, x):
        z = self.rng.standard_normal(self.d)
        return x + math.exp(self.log_scale) * (self.chol @ z)

    def adapt(self, accepted, t):
        self.log_scale += ((1.0 if accepted else 0.0) - TARGET_ACCEPT) / (t + 1.0) ** 0.6

    def rate(self):
        return self.accepted / self.proposed if self.proposed else float("nan")


def run_mcmc(series: DailySeries, specs, delay: DiscretizedDelay, config: McmcConfig,
             anchor: dt.date = DEFAULT_ANCHOR) -> McmcSamples:
    """Sample the deconvolution posterior; bit-identical for a fixed seed.

    ``specs[0]`` is the cubic smooth for the log infection profile over the
    extended (lead-in plus observed) day axis; any further specs are cyclic
    effects on the log expected deaths.
    """
    model, cov_ext, cov_obs, vb, blocks_w = _setup(series, specs, delay, config, anchor)
    x, lam_v, lam_w = _initial_state(model, series, specs, delay, cov_ext, cov_obs, config)
    if not math.isfinite(model.neg_log_post(x, lam_v, lam_w)[0]) or \
            model.neg_log_post(x, lam_v, lam_w)[0] >= 1e100:
        raise FloatingPointError("non-finite likelihood at the initial state")
    rng = np.random.default_rng(config.seed)
    kv, kw = model.kv, model.kw
    iv = slice(0, kv)
    iw = slice(kv, kv + kw)
    # proposal shapes: conditional covariance of each block at the mode
    Hv, Hw, ht = model.information(x, lam_v, lam_w)
    blocks = {"profile": _Block(Hv, model.Tv, rng)}
    if kw:
        blocks["cyclic"] = _Block(Hw, model.Tw, rng)
    if model.negbin:
        blocks["theta"] = _Block(np.array([[max(ht, 1e-8)]]), np.eye(1), rng)

    bv, bw, tau = model.split(x)
    bv, bw = bv.copy(), bw.copy()
    theta = math.exp(tau) if model.negbin else 1.0
    fixed = config.fixed_log_lambda is not None
    f = model.profile(bv)
    h = model.Bobs @ f
    ew = model.cyclic(bw)
    m = h * ew
    ll = model.loglik(m, theta)
    if not math.isfinite(ll):
        raise FloatingPointError("non-finite likelihood at the initial state")
    pv = model.prior_v(bv, lam_v)
    pw = model.prior_w(bw, lam_w)

    n_kept = config.n_kept
    P = kv + kw
    out_b = np.empty((n_kept, P))
    out_theta = np.empty(n_kept)
    out_rho = np.empty((n_kept, 1 + len(lam_w)))
    out_lp = np.empty(n_kept)
    burn = config.burn_in
    history = []
    refits = {burn // 2, (3 * burn) // 4} if burn >= 400 else set()
    kept = 0
    for t in range(config.iterations):
        adapting = t < burn

        # profile coefficients
        blk = blocks["profile"]
        prop = blk.propose(bv)
        f_p = model.profile(prop)
        m_p = (model.Bobs @ f_p) * ew
        ll_p = model.loglik(m_p, theta)
        pv_p = model.prior_v(prop, lam_v)
        acc = math.log(rng.random()) < (ll_p + pv_p) - (ll + pv)
        if acc:
            bv, f, m, ll, pv = prop, f_p, m_p, ll_p, pv_p
            h = model.Bobs @ f
        if adapting:
            blk.adapt(acc, t)
        else:
            blk.proposed += 1
            blk.accepted += acc

        # cyclic coefficients
        if kw:
            blk = blocks["cyclic"]
            prop = blk.propose(bw)
            ew_p = model.cyclic(prop)
            m_p = h * ew_p
            ll_p = model.loglik(m_p, theta)
            pw_p = model.prior_w(prop, lam_w)
            acc = math.log(rng.random()) < (ll_p + pw_p) - (ll + pw)
            if acc:
                bw, ew, m, ll, pw = prop, ew_p, m_p, ll_p, pw_p
            if adapting:
                blk.adapt(acc, t)
            else:
                blk.proposed += 1
                blk.accepted += acc

        # dispersion, flat prior on log theta within bounds
        if model.negbin:
            blk = blocks["theta"]
            tau_p = float(blk.propose(np.array([math.log(theta)]))[0])
            if THETA_BOUNDS[0] <= tau_p <= THETA_BOUNDS[1]:
                th_p = math.exp(tau_p)
                ll_p = model.loglik(m, th_p)
                acc = math.log(rng.random()) < ll_p - ll
            else:
                acc = False
            if acc:
                theta, ll = th_p, ll_p
            if adapting:
                blk.adapt(acc, t)
            else:
                blk.proposed += 1
                blk.accepted += acc

        # smoothing precisions
        if not fixed:
            q = model.penalty_v(bv)
            lam_v = rng.gamma(1e-3 + model.rank_v / 2.0, 1.0 / (1e-3 + q / 2.0))
            pv = model.prior_v(bv, lam_v)
            for j in range(len(lam_w)):
                q = model.penalty_w(bw, j)
                lam_w[j] = rng.gamma(1e-3 + model.rank_w[j] / 2.0, 1.0 / (1e-3 + q / 2.0))
            pw = model.prior_w(bw, lam_w)

        if adapting:
            if t >= burn // 4:
                history.append(np.log([lam_v] + list(lam_w)))
            if t in refits and history:
                # re-shape proposals at the current state and typical precisions
                rho = np.mean(history, axis=0)
                xc = np.concatenate([bv, bw] + ([[math.log(theta)]] if model.negbin else []))
                Hv, Hw, ht = model.information(xc, math.exp(rho[0]), list(np.exp(rho[1:])))
                blocks["profile"].set_precision(Hv)
                if kw:
                    blocks["cyclic"].set_precision(Hw)
                if model.negbin:
                    blocks["theta"].set_precision(np.array([[max(ht, 1e-8)]]))
                for b in blocks.values():
                    b.log_scale = math.log(2.38 / math.sqrt(b.d))
        elif (t + 1 - burn) % config.thin == 0 and kept < n_kept:
            out_b[kept, :kv] = bv
            out_b[kept, kv:] = bw
            out_theta[kept] = theta
            out_rho[kept] = np.log([lam_v] + list(lam_w))
            out_lp[kept] = ll + pv + pw
            kept += 1

    rates = {k: float(b.rate()) for k, b in blocks.items()}
    warn = any(not (0.05 < r < 0.6) for r in rates.values())
    if warn:
        warnings.warn(f"acceptance rates outside (0.05, 0.6): {rates}", RuntimeWarning, stacklevel=2)
    names = tuple(s.name for s in specs)
    return McmcSamples(out_b[:kept], out_theta[:kept] if model.negbin else np.full(kept, np.inf),
                       out_rho[:kept], rates, np.asarray(cov_ext.day), vb.design, config.seed,
                       warn, names, out_lp[:kept])


def _chain_configs(config: McmcConfig, chains):
    seeds = np.random.SeedSequence(config.seed).generate_state(chains)
    return [McmcConfig(config.iterations, config.thin, config.burn_in, int(s), config.ridge,
                       config.family, config.lead_in, config.fixed_log_lambda) for s in seeds]


def run_chains(series, specs, delay, config: McmcConfig, chains=1, anchor=DEFAULT_ANCHOR,
               workers=1):
    """Independent chains with seeds derived from ``config.seed``.

    With ``workers > 1`` chains run in separate processes; results do not
    depend on the number of workers.
    """
    if chains < 1:
        raise ValueError("chains must be positive")
    cfgs = _chain_configs(config, chains)
    if workers > 1 and chains > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(run_mcmc, series, specs, delay, c, anchor) for c in cfgs]
            return [f.result() for f in futs]
    return [run_mcmc(series, specs, delay, c, anchor) for c in cfgs]


def combine(chains) -> McmcSamples:
    c0 = chains[0]
    return McmcSamples(
        np.concatenate([c.b for c in chains]),
        np.concatenate([c.theta for c in chains]),
        np.concatenate([c.rho for c in chains]),
        {k: float(np.mean([c.acceptance_rate[k] for c in chains])) for k in c0.acceptance_rate},
        c0.days, c0.design_v, c0.seed, any(c.warning for c in chains), c0.smooth_names,
        np.concatenate([c.log_post for c in chains]),
    )


def split_rhat(draws) -> float:
    """Split-chain potential scale reduction for draws shaped ``(chains, n)``."""
    x = np.atleast_2d(np.asarray(draws, float))
    n = x.shape[1] // 2
    halves = np.vstack([x[:, :n], x[:, n:2 * n]])
    m = halves.shape[0]
    means = halves.mean(axis=1)
    W = halves.var(axis=1, ddof=1).mean()
    Bn = means.var(ddof=1)
    var_plus = (n - 1) / n * W + Bn
    return float(math.sqrt(var_plus / W)) if W > 0 else float("nan")


@dataclass(frozen=True, eq=False)
class ProfileSummary:
    days: np.ndarray
    median: np.ndarray
    band50: tuple
    band80: tuple
    band95: tuple
    peak_probs: np.ndarray
    curvature: np.ndarray
    gradient: np.ndarray

    def peak_day(self) -> int:
        return int(self.days[np.argmax(self.median)])


QUANTILES = (0.025, 0.10, 0.25, 0.50, 0.75, 0.90, 0.975)


def infection_profile(samples: McmcSamples, design_v=None) -> ProfileSummary:
    """Pointwise posterior summaries of ``f = exp(X_v b)`` over the kept draws.

    ``curvature`` is the squared second difference of the log median and
    ``gradient`` the absolute first difference of the median, each padded
    with NaN so every array is aligned with ``days``.
    """
    Xv = samples.design_v if design_v is None else np.asarray(design_v)
    if samples.n_kept < 100:
        raise ValueError("need at least 100 kept draws")
    F = np.exp(samples.b[:, :Xv.shape[1]] @ Xv.T)
    q = np.quantile(F, QUANTILES, axis=0)
    med = q[3]
    idx = np.argmax(F, axis=1)
    counts = np.bincount(idx, minlength=F.shape[1])
    peak = counts / counts.sum()
    curv = np.full(med.size, np.nan)
    curv[1:-1] = np.diff(np.log(med), 2) ** 2
    grad = np.full(med.size, np.nan)
    grad[1:] = np.abs(np.diff(med))
    return ProfileSummary(samples.days, med, (q[2], q[4]), (q[1], q[5]), (q[0], q[6]), peak,
                          curv, grad)
