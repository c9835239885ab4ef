"""Penalized likelihood fitting of count GAMs with a log link.

The inner loop is a Newton form of penalized IRLS for fixed smoothing
parameters; the outer loop maximizes the Laplace approximate marginal
likelihood over log smoothing parameters and, for the negative binomial,
log theta. The gradient of the outer criterion is computed exactly using
implicit differentiation of the inner optimum.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize as spopt, stats

from . import family as fam
from .data import CovariateTable
from .splines import BasisBlock, SmoothSpec, apply_centering, smooth_basis

LOG_BOUND = 15.0

# smooth name -> (kind, covariate, period, default rank)
SMOOTHS = {
    "trend": ("cubic", "day", None, None),
    "weekly": ("cyclic", "dow", 7.0, 6),
    "biweekly": ("cyclic", "biweek", 14.0, 8),
    "monthly": ("cyclic", "dom", 30.0, 10),
}


class FitError(RuntimeError):
    """Numerical failure while fitting."""


class SingularSystemError(FitError):
    pass


class ConvergenceError(FitError):
    pass


def default_specs(formula, n) -> list[SmoothSpec]:
    """SmoothSpecs for a formula such as ``["trend", "weekly"]`` over ``n`` days."""
    specs = []
    for name in formula:
        if name not in SMOOTHS:
            raise ValueError(f"unknown smooth {name!r}; choose from {sorted(SMOOTHS)}")
        kind, cov, period, rank = SMOOTHS[name]
        if rank is None:
            rank = min(20, n // 4)
        specs.append(SmoothSpec(kind, rank, cov, period, label=name))
    return specs


@dataclass(frozen=True, eq=False)
class Design:
    """Intercept plus centered smooth blocks, with embedded penalties.

    ``S_list[j]`` is block ``j``'s penalty divided by ``penalty_scale[j]`` and
    embedded in a ``P x P`` zero matrix, so ``lambda_j`` is on a scale
    comparable to the data regardless of covariate units.
    """

    X: np.ndarray
    blocks: tuple
    offsets: tuple
    S_list: tuple
    penalty_scale: tuple
    formula: tuple
    cov: CovariateTable | None = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def P(self) -> int:
        return self.X.shape[1]

    @property
    def n_smooth(self) -> int:
        return len(self.blocks)

    def term_slice(self, j) -> slice:
        return slice(self.offsets[j], self.offsets[j] + self.blocks[j].width)

    def term_index(self, term) -> int:
        if isinstance(term, int):
            if not 0 <= term < self.n_smooth:
                raise KeyError(f"no smooth term {term}")
            return term
        if term in self.formula:
            return self.formula.index(term)
        covs = [b.spec.covariate for b in self.blocks]
        if term in covs:
            return covs.index(term)
        raise KeyError(f"no smooth term {term!r}")

    def S_lambda(self, lam) -> np.ndarray:
        S = np.zeros((self.P, self.P))
        for l, Sj in zip(lam, self.S_list):
            S += l * Sj
        return S

    def penalty_ranks(self) -> list[int]:
        return [b.penalty_rank() for b in self.blocks]

    def model_matrix(self, cov: CovariateTable) -> np.ndarray:
        cols = [np.ones((len(cov), 1))]
        for b in self.blocks:
            try:
                x = cov.column(b.spec.covariate)
            except KeyError as err:
                raise ValueError(str(err)) from None
            cols.append(b.evaluate(x))
        return np.hstack(cols)

    def to_dict(self) -> dict:
        return {
            "formula": list(self.formula),
            "n": self.n,
            "P": self.P,
            "offsets": list(self.offsets),
            "penalty_scale": list(self.penalty_scale),
            "X": self.X.tolist(),
            "blocks": [b.to_dict() for b in self.blocks],
        }


def assemble_design(cov: CovariateTable, specs) -> Design:
    specs = list(specs)
    if not specs:
        raise ValueError("at least one smooth is required")
    seen = set()
    for s in specs:
        if s.covariate in seen:
            raise ValueError(f"duplicate smooth on covariate {s.covariate!r}")
        seen.add(s.covariate)
    n = len(cov)
    cols = [np.ones((n, 1))]
    blocks, offsets, scales = [], [], []
    off = 1
    for s in specs:
        try:
            x = cov.column(s.covariate)
        except KeyError as err:
            raise ValueError(str(err)) from None
        b = apply_centering(smooth_basis(x, s))
        blocks.append(b)
        offsets.append(off)
        cols.append(b.design)
        # same normalization idea as mgcv: ||S|| relative to max row norm of X squared
        maxx = np.abs(b.design).sum(axis=1).max() ** 2
        scales.append(float(np.abs(b.penalty).sum(axis=0).max() / maxx))
        off += b.width
    X = np.hstack(cols)
    S_list = []
    for b, o, c in zip(blocks, offsets, scales):
        S = np.zeros((off, off))
        S[o:o + b.width, o:o + b.width] = b.penalty / c
        S_list.append(S)
    formula = tuple(s.name for s in specs)
    return Design(X, tuple(blocks), tuple(offsets), tuple(S_list), tuple(scales), formula, cov)


@dataclass(frozen=True)
class HyperParams:
    log_lambda: tuple
    log_theta: float | None = None
    unpenalized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "log_lambda", tuple(float(v) for v in np.atleast_1d(self.log_lambda)))
        if not all(math.isfinite(v) for v in self.log_lambda):
            raise ValueError("log_lambda must be finite")
        if self.log_theta is not None:
            object.__setattr__(self, "log_theta", float(self.log_theta))
            if not math.isfinite(self.log_theta):
                raise ValueError("log_theta must be finite")

    @property
    def lambdas(self) -> np.ndarray:
        if self.unpenalized:
            return np.zeros(len(self.log_lambda))
        return np.exp(self.log_lambda)

    def vector(self) -> np.ndarray:
        v = list(self.log_lambda)
        if self.log_theta is not None:
            v.append(self.log_theta)
        return np.array(v)

    def to_dict(self) -> dict:
        return {"log_lambda": list(self.log_lambda), "log_theta": self.log_theta,
                "unpenalized": self.unpenalized}


def family_at(family: fam.Family, hyper: HyperParams) -> fam.Family:
    if family.is_negbin and hyper.log_theta is not None:
        return family.with_theta(math.exp(hyper.log_theta))
    return family


@dataclass(frozen=True, eq=False)
class PirlsResult:
    beta: np.ndarray
    H: np.ndarray
    deviance: float
    converged: bool
    iterations: int
    mu: np.ndarray
    penalized_deviance: float
    trace: tuple = field(default=(), repr=False)


def _mu(X, beta):
    with np.errstate(over="ignore"):
        return np.exp(X @ beta)


def _pdev(family, y, mu, beta, S):
    if not np.all(np.isfinite(mu)) or np.any(mu <= 0):
        return np.inf
    return fam.deviance(family, y, mu) + float(beta @ S @ beta)


def _cho(A):
    try:
        return linalg.cho_factor(A, lower=True)
    except linalg.LinAlgError:
        cond = np.linalg.cond(A)
        raise SingularSystemError(
            f"penalized weighted system is not positive definite (condition number {cond:.3g})") from None


def pirls(design: Design, family: fam.Family, hyper: HyperParams, y, beta0=None,
          tol=1e-8, max_iter=200) -> PirlsResult:
    """Maximize the penalized log-likelihood for fixed hyperparameters.

    Newton steps use the observed information, which is positive for both
    families under the log link. Steps that raise the penalized deviance are
    halved. Convergence needs a relative penalized-deviance change below
    ``tol`` plus a negligible coefficient step.
    """
    y = np.asarray(y, float)
    X = design.X
    if X.shape[0] < 2:
        raise ValueError("need at least two observations")
    if y.shape != (X.shape[0],):
        raise ValueError("y does not match the design")
    family = family_at(family, hyper)
    S = design.S_lambda(hyper.lambdas)
    if beta0 is None:
        beta = np.zeros(design.P)
        beta[0] = math.log(max(y.mean(), 1e-3))
    else:
        beta = np.array(beta0, float)
    mu = _mu(X, beta)
    pdev = _pdev(family, y, mu, beta, S)
    if not np.isfinite(pdev):
        beta = np.zeros(design.P)
        beta[0] = math.log(max(y.mean(), 1e-3))
        mu = _mu(X, beta)
        pdev = _pdev(family, y, mu, beta, S)
    converged = False
    trace = [pdev]
    it = 0
    for it in range(1, max_iter + 1):
        w = fam.weight_eta(family, y, mu)
        g = fam.score_eta(family, y, mu)
        A = X.T @ (w[:, None] * X) + S
        step = linalg.cho_solve(_cho(A), X.T @ g - S @ beta)
        new = beta + step
        new_mu = _mu(X, new)
        new_pdev = _pdev(family, y, new_mu, new, S)
        halvings = 0
        while not new_pdev <= pdev and halvings < 40:
            step /= 2.0
            new = beta + step
            new_mu = _mu(X, new)
            new_pdev = _pdev(family, y, new_mu, new, S)
            halvings += 1
        if not new_pdev <= pdev:
            # no descent possible at working precision
            converged = abs(float(np.max(np.abs(step)))) < 1e-6
            break
        rel = (pdev - new_pdev) / (abs(new_pdev) + 0.1)
        small_step = np.max(np.abs(step)) <= 1e-9 * (1.0 + np.max(np.abs(new)))
        beta, mu, pdev = new, new_mu, new_pdev
        trace.append(pdev)
        if rel < tol and (small_step or rel < 1e-14):
            converged = True
            break
    w = fam.weight_eta(family, y, mu)
    H = X.T @ (w[:, None] * X)
    return PirlsResult(beta, (H + H.T) / 2.0, fam.deviance(family, y, mu), converged, it,
                       mu, pdev, tuple(trace))


def _logdet_plus(S, tol=1e-10):
    w = linalg.eigvalsh(S)
    keep = w > tol * w.max()
    return int(keep.sum()), float(np.sum(np.log(w[keep])))


@dataclass(frozen=True, eq=False)
class LamlResult:
    value: float
    gradient: np.ndarray
    fit: PirlsResult
    A_chol: tuple


def laml_eval(design: Design, family: fam.Family, hyper: HyperParams, y, beta0=None,
              gradient=True) -> LamlResult:
    """Laplace approximate log marginal likelihood and its exact gradient.

    Gradient components follow ``hyper.vector()``: one per log smoothing
    parameter, then log theta when it is a free parameter.
    """
    y = np.asarray(y, float)
    fit = pirls(design, family, hyper, y, beta0)
    f = family_at(family, hyper)
    lam = hyper.lambdas
    S = design.S_lambda(lam)
    A = fit.H + S
    try:
        cA = linalg.cho_factor(A, lower=True)
    except linalg.LinAlgError:
        raise FitError("H + S_lambda is not positive definite") from None
    beta, mu = fit.beta, fit.mu
    ll = fam.log_likelihood(f, y, mu)
    logdetA = 2.0 * float(np.sum(np.log(np.diag(cA[0]))))
    logdetS, null_dim = 0.0, design.P
    ranks = []
    if not hyper.unpenalized:
        for l, b, c in zip(lam, design.blocks, design.penalty_scale):
            r, ld = _logdet_plus(b.penalty / c)
            ranks.append(r)
            logdetS += r * math.log(l) + ld
            null_dim -= r
    value = (ll - 0.5 * float(beta @ S @ beta) + 0.5 * logdetS - 0.5 * logdetA
             + 0.5 * null_dim * math.log(2.0 * math.pi))
    grad = None
    if gradient:
        X = design.X
        Ainv = linalg.cho_solve(cA, np.eye(design.P))
        lev = np.einsum("ij,jk,ik->i", X, Ainv, X)
        dw = fam.dweight_deta(f, y, mu)
        g = []
        for j, Sj in enumerate(design.S_list):
            if hyper.unpenalized:
                g.append(0.0)
                continue
            Sb = Sj @ beta
            deta = X @ (-lam[j] * (Ainv @ Sb))
            g.append(-0.5 * lam[j] * float(beta @ Sb) + 0.5 * ranks[j]
                     - 0.5 * lam[j] * float(np.sum(Ainv * Sj))
                     - 0.5 * float(np.sum(lev * dw * deta)))
        if f.is_negbin and hyper.log_theta is not None:
            th = f.theta
            dbeta = Ainv @ (X.T @ fam.dscore_dtheta(f, y, mu))
            deta = X @ dbeta
            dll = float(np.sum(fam.dloglik_dtheta(f, y, mu)))
            dH = fam.dweight_dtheta(f, y, mu) + dw * deta
            g.append(th * (dll - 0.5 * float(np.sum(lev * dH))))
        grad = np.array(g)
    return LamlResult(value, grad, fit, cA)


def laml(design: Design, family: fam.Family, hyper: HyperParams, y) -> float:
    return laml_eval(design, family, hyper, y, gradient=False).value


@dataclass(frozen=True, eq=False)
class TermTest:
    name: str
    edf: float
    df: int
    statistic: float
    p_value: float

    def to_dict(self) -> dict:
        return {"term": self.name, "edf": self.edf, "df": self.df,
                "statistic": self.statistic, "p_value": self.p_value}


@dataclass(frozen=True, eq=False)
class GamFit:
    design: Design
    family: fam.Family
    y: np.ndarray
    beta_hat: np.ndarray
    H: np.ndarray
    V: np.ndarray
    hyper: HyperParams
    edf: np.ndarray
    edf_total: float
    deviance: float
    null_deviance: float
    dev_explained: float
    r_sq_adj: float
    term_tests: tuple
    fitted: np.ndarray
    laml: float
    converged: bool = True
    outer_iterations: int = 0

    @property
    def eta(self) -> np.ndarray:
        return self.design.X @ self.beta_hat

    @property
    def theta(self) -> float | None:
        return self.family.theta

    def to_dict(self) -> dict:
        return {
            "formula": list(self.design.formula),
            "family": self.family.kind,
            "theta": self.family.theta,
            "n": int(self.design.n),
            "coefficients": self.beta_hat.tolist(),
            "hyper": self.hyper.to_dict(),
            "edf": self.edf.tolist(),
            "edf_total": self.edf_total,
            "deviance": self.deviance,
            "null_deviance": self.null_deviance,
            "dev_explained": self.dev_explained,
            "r_sq_adj": self.r_sq_adj,
            "laml": self.laml,
            "converged": self.converged,
            "terms": [t.to_dict() for t in self.term_tests],
        }


def wald_test(beta, V, edf):
    """Wald statistic using a rank ``round(edf)`` pseudo-inverse of ``V``."""
    df = int(min(max(1, round(edf)), beta.size))
    w, U = linalg.eigh(V)
    idx = np.argsort(w)[::-1][:df]
    z = U[:, idx].T @ beta
    stat = float(np.sum(z**2 / w[idx]))
    return df, stat, float(stats.chi2.sf(stat, df))


def build_fit(design: Design, family: fam.Family, hyper: HyperParams, y,
              beta0=None, outer_iterations=0, converged=True) -> GamFit:
    """Assemble a complete GamFit at fixed hyperparameters."""
    y = np.asarray(y, float)
    res = laml_eval(design, family, hyper, y, beta0, gradient=False)
    fit = res.fit
    f = family_at(family, hyper)
    V = linalg.cho_solve(res.A_chol, np.eye(design.P))
    V = (V + V.T) / 2.0
    F = V @ fit.H
    edf = np.array([np.trace(F[design.term_slice(j), design.term_slice(j)])
                    for j in range(design.n_smooth)])
    edf_total = float(np.trace(F))
    null_dev = fam.deviance(f, y, np.full_like(y, y.mean()))
    ratio = fit.deviance / null_dev if null_dev > 0 else 0.0
    n = design.n
    r_sq_adj = 1.0 - (n - 1) / (n - edf_total) * ratio
    tests = []
    for j, name in enumerate(design.formula):
        sl = design.term_slice(j)
        df, stat, p = wald_test(fit.beta[sl], V[sl, sl], edf[j])
        tests.append(TermTest(name, float(edf[j]), df, stat, p))
    return GamFit(design, f, y, fit.beta, fit.H, V, hyper, edf, edf_total, fit.deviance,
                  null_dev, 1.0 - ratio, r_sq_adj, tuple(tests), fit.mu, res.value,
                  converged and fit.converged, outer_iterations)


def initial_hyper(design: Design, family: fam.Family, y) -> HyperParams:
    """Starting values: balance each penalty against its block's information."""
    y = np.asarray(y, float)
    mu = max(y.mean(), 1e-3)
    log_lambda = []
    for j, Sj in enumerate(design.S_list):
        sl = design.term_slice(j)
        Xj = design.X[:, sl]
        info = mu * np.trace(Xj.T @ Xj)
        log_lambda.append(float(np.clip(math.log(info / np.trace(Sj)), -LOG_BOUND + 1, LOG_BOUND - 1)))
    log_theta = None
    if family.is_negbin:
        pois = pirls(design, fam.poisson(), HyperParams(log_lambda), y)
        m = pois.mu
        excess = float(np.sum((y - m) ** 2 - m))
        theta = float(np.sum(m**2)) / excess if excess > 0 else 1e3
        log_theta = float(np.clip(math.log(theta), -LOG_BOUND + 1, LOG_BOUND - 1))
    return HyperParams(tuple(log_lambda), log_theta)


def optimize(design: Design, family: fam.Family, y, init: HyperParams | None = None,
             max_iter=100, fix_theta=False) -> GamFit:
    """Select hyperparameters by maximizing the Laplace marginal likelihood.

    Uses bounded L-BFGS on ``(log lambda, log theta)`` with the exact
    gradient; every evaluation runs PIRLS warm-started from the previous
    optimum. With ``fix_theta`` a negative binomial keeps ``family.theta``.
    """
    y = np.asarray(y, float)
    if init is None:
        init = initial_hyper(design, family, y)
    free_theta = family.is_negbin and not fix_theta
    if free_theta and init.log_theta is None:
        init = HyperParams(init.log_lambda, math.log(family.theta))
    if not free_theta:
        init = HyperParams(init.log_lambda)
    m = design.n_smooth
    state = {"beta": None, "best": None}

    def unpack(x):
        return HyperParams(tuple(x[:m]), float(x[m]) if free_theta else None)

    def objective(x):
        h = unpack(x)
        try:
            r = laml_eval(design, family, h, y, state["beta"])
        except (FitError, FloatingPointError):
            try:
                r = laml_eval(design, family, h, y, None)
            except (FitError, FloatingPointError):
                return 1e20, np.zeros_like(x)
        if not r.fit.converged or not np.isfinite(r.value):
            return 1e20, np.zeros_like(x)
        state["beta"] = r.fit.beta
        if state["best"] is None or r.value > state["best"][0]:
            state["best"] = (r.value, x.copy(), r.fit.beta)
        return -r.value, -r.gradient

    x0 = np.clip(init.vector(), -LOG_BOUND, LOG_BOUND)
    res = spopt.minimize(objective, x0, jac=True, method="L-BFGS-B",
                         bounds=[(-LOG_BOUND, LOG_BOUND)] * x0.size,
                         options={"maxiter": max_iter, "ftol": 1e-12, "gtol": 1e-6})
    if state["best"] is None:
        raise FitError("every inner fit failed")
    best_val, best_x, best_beta = state["best"]
    if res.nit >= max_iter:
        raise ConvergenceError(f"outer optimization did not converge in {max_iter} iterations")
    x = res.x if -res.fun >= best_val - 1e-12 else best_x
    return build_fit(design, family, unpack(x), y, best_beta, outer_iterations=res.nit,
                     converged=True)


def fit_gam(cov: CovariateTable, y, formula=None, family: fam.Family | None = None,
            specs=None, init=None, fix_theta=False) -> GamFit:
    """Convenience: build the design for ``formula`` and run :func:`optimize`."""
    if specs is None:
        specs = default_specs(formula or ("trend",), len(cov))
    family = family or fam.negbin(1.0)
    design = assemble_design(cov, specs)
    return optimize(design, family, y, init, fix_theta=fix_theta)


def predict(fit: GamFit, cov: CovariateTable, scale="response"):
    """Posterior mean and standard error at new covariates."""
    if scale not in ("link", "response"):
        raise ValueError("scale must be 'link' or 'response'")
    Xp = fit.design.model_matrix(cov)
    eta = Xp @ fit.beta_hat
    se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", Xp, fit.V, Xp), 0.0))
    if scale == "link":
        return eta, se
    mu = np.exp(eta)
    return mu, mu * se

