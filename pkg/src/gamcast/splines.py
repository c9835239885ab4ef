"""Penalized cubic regression and cyclic cubic spline bases.

Both bases are parameterized by the function values at the knots, so the
coefficient vector ``c * ones`` represents the constant ``c``. Second
derivatives at the knots follow linearly from the values (``delta = F beta``)
and the wiggliness penalty ``beta' S beta`` equals the integral of the squared
second derivative over the knot range.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg


class SplineError(ValueError):
    pass


@dataclass(frozen=True)
class SmoothSpec:
    kind: str
    rank: int
    covariate: str
    period: float | None = None
    knots: tuple | None = None
    label: str | None = None

    def __post_init__(self):
        if self.kind not in ("cubic", "cyclic"):
            raise SplineError(f"unknown smooth kind {self.kind!r}")
        if self.kind == "cubic" and self.rank < 3:
            raise SplineError("cubic smooth needs rank >= 3")
        if self.kind == "cyclic":
            if self.rank < 4:
                raise SplineError("cyclic smooth needs rank >= 4")
            if self.period is None or not self.period > 0:
                raise SplineError("cyclic smooth needs a positive period")
        if self.knots is not None:
            k = np.asarray(self.knots, float)
            object.__setattr__(self, "knots", tuple(k.tolist()))
            if np.any(np.diff(k) <= 0):
                raise SplineError("knots must be strictly increasing")
            want = self.rank + 1 if self.kind == "cyclic" else self.rank
            if k.size != want:
                raise SplineError(f"{self.kind} smooth of rank {self.rank} needs {want} knots")
            if self.kind == "cyclic" and not (np.isclose(k[0], 0.0) and np.isclose(k[-1], self.period)):
                raise SplineError("cyclic knots must span [0, period]")

    @property
    def name(self) -> str:
        return self.label or self.covariate

    def place_knots(self, x) -> "SmoothSpec":
        """Return a copy with evenly spaced knots over ``x`` (cubic) or ``[0, period]``."""
        if self.knots is not None:
            return self
        if self.kind == "cyclic":
            knots = np.linspace(0.0, self.period, self.rank + 1)
        else:
            x = np.asarray(x, float)
            if np.unique(x).size < self.rank:
                raise SplineError(f"need at least {self.rank} distinct values of {self.covariate}")
            knots = np.linspace(x.min(), x.max(), self.rank)
        return replace(self, knots=tuple(knots.tolist()))


def cr_matrices(knots):
    """Map from knot values to knot second derivatives, and the penalty, for natural end conditions."""
    xk = np.asarray(knots, float)
    k = xk.size
    h = np.diff(xk)
    D = np.zeros((k - 2, k))
    B = np.zeros((k - 2, k - 2))
    for i in range(k - 2):
        D[i, i] = 1.0 / h[i]
        D[i, i + 1] = -1.0 / h[i] - 1.0 / h[i + 1]
        D[i, i + 2] = 1.0 / h[i + 1]
        B[i, i] = (h[i] + h[i + 1]) / 3.0
        if i < k - 3:
            B[i, i + 1] = B[i + 1, i] = h[i + 1] / 6.0
    BinvD = linalg.solve(B, D, assume_a="pos")
    F = np.vstack([np.zeros(k), BinvD, np.zeros(k)])
    S = D.T @ BinvD
    return F, (S + S.T) / 2.0


def cc_matrices(knots):
    """Cyclic analogue of :func:`cr_matrices`; the last knot is identified with the first."""
    xk = np.asarray(knots, float)
    r = xk.size - 1
    h = np.diff(xk)
    D = np.zeros((r, r))
    B = np.zeros((r, r))
    for i in range(r):
        hp, hi = h[i - 1], h[i]
        B[i, i] = (hp + hi) / 3.0
        B[i, (i + 1) % r] += hi / 6.0
        B[i, (i - 1) % r] += hp / 6.0
        D[i, i] = -1.0 / hp - 1.0 / hi
        D[i, (i + 1) % r] += 1.0 / hi
        D[i, (i - 1) % r] += 1.0 / hp
    F = linalg.solve(B, D, assume_a="pos")
    S = D.T @ F
    return F, (S + S.T) / 2.0


def _piecewise_design(x, xk, F, deriv, cyclic):
    x = np.asarray(x, float)
    k = F.shape[1]
    nint = xk.size - 1
    j = np.clip(np.searchsorted(xk, x, side="right") - 1, 0, nint - 1)
    h = xk[j + 1] - xk[j]
    lo = x - xk[j]
    up = xk[j + 1] - x
    if deriv == 0:
        am, ap = up / h, lo / h
        cm = (up**3 / h - h * up) / 6.0
        cp = (lo**3 / h - h * lo) / 6.0
    elif deriv == 1:
        am, ap = -1.0 / h, 1.0 / h
        cm = (-3.0 * up**2 / h + h) / 6.0
        cp = (3.0 * lo**2 / h - h) / 6.0
    elif deriv == 2:
        am = ap = np.zeros_like(x)
        cm, cp = up / h, lo / h
    else:
        raise SplineError("deriv must be 0, 1 or 2")
    j1 = (j + 1) % k if cyclic else j + 1
    rows = np.arange(x.size)
    X = cm[:, None] * F[j] + cp[:, None] * F[j1]
    np.add.at(X, (rows, j), am)
    np.add.at(X, (rows, j1), ap)
    return X


def raw_basis(x, spec: SmoothSpec, deriv=0):
    """Evaluate the unconstrained basis (or a derivative of it) at ``x``."""
    if spec.knots is None:
        raise SplineError("spec has no knots; call place_knots first")
    xk = np.asarray(spec.knots, float)
    x = np.atleast_1d(np.asarray(x, float))
    if spec.kind == "cubic":
        tol = 1e-10 * (xk[-1] - xk[0])
        if np.any(x < xk[0] - tol) or np.any(x > xk[-1] + tol):
            raise SplineError(f"{spec.covariate} values outside the knot range [{xk[0]}, {xk[-1]}]")
        F, _ = cr_matrices(xk)
        return _piecewise_design(np.clip(x, xk[0], xk[-1]), xk, F, deriv, cyclic=False)
    xm = np.mod(x, spec.period)
    # positive multiples of the period land on the end of the last interval
    xm[(xm == 0.0) & (x > 0.0)] = spec.period
    x = xm
    F, _ = cc_matrices(xk)
    return _piecewise_design(x, xk, F, deriv, cyclic=True)


@dataclass(frozen=True, eq=False)
class BasisBlock:
    """Evaluated basis for one smooth term with its penalty.

    ``transform`` is the ``p x (p-1)`` reparameterization applied by
    centering; ``constraint`` holds the raw column means it annihilates.
    """

    spec: SmoothSpec
    design: np.ndarray
    penalty: np.ndarray
    centered: bool = False
    constraint: np.ndarray | None = None
    transform: np.ndarray | None = None

    @property
    def width(self) -> int:
        return self.design.shape[1]

    def evaluate(self, x, deriv=0) -> np.ndarray:
        X = raw_basis(x, self.spec, deriv)
        return X @ self.transform if self.centered else X

    def null_space(self, tol=1e-10) -> np.ndarray:
        w, U = linalg.eigh(self.penalty)
        return U[:, w <= tol * max(w.max(), 0.0)]

    def penalty_rank(self, tol=1e-10) -> int:
        return self.width - self.null_space(tol).shape[1]

    def to_dict(self) -> dict:
        return {
            "covariate": self.spec.covariate,
            "kind": self.spec.kind,
            "rank": self.spec.rank,
            "period": self.spec.period,
            "knots": list(self.spec.knots),
            "centered": self.centered,
            "design": self.design.tolist(),
            "penalty": self.penalty.tolist(),
        }


def cubic_spline_basis(x, spec: SmoothSpec) -> BasisBlock:
    if spec.kind != "cubic":
        raise SplineError("cubic_spline_basis needs a cubic spec")
    x = np.asarray(x, float)
    if np.unique(x).size < spec.rank:
        raise SplineError(f"fewer than {spec.rank} distinct {spec.covariate} values")
    spec = spec.place_knots(x)
    _, S = cr_matrices(spec.knots)
    return BasisBlock(spec, raw_basis(x, spec), S)


def cyclic_spline_basis(x, spec: SmoothSpec) -> BasisBlock:
    if spec.kind != "cyclic":
        raise SplineError("cyclic_spline_basis needs a cyclic spec")
    spec = spec.place_knots(x)
    _, S = cc_matrices(spec.knots)
    return BasisBlock(spec, raw_basis(x, spec), S)


def smooth_basis(x, spec: SmoothSpec) -> BasisBlock:
    if spec.kind == "cubic":
        return cubic_spline_basis(x, spec)
    return cyclic_spline_basis(x, spec)


def apply_centering(block: BasisBlock) -> BasisBlock:
    """Absorb the sum-to-zero constraint over the observed rows.

    The constraint vector is the column mean of the design; an orthonormal
    basis of its complement (from a full QR) maps the ``p`` raw coefficients
    to ``p - 1`` free ones.
    """
    if block.centered:
        raise SplineError("block is already centered")
    X = block.design
    if np.any(np.all(X == 0.0, axis=0)):
        raise SplineError("design has an all-zero column")
    c = X.mean(axis=0)
    Q, _ = linalg.qr(c[:, None])
    Z = Q[:, 1:]
    Xc = X @ Z
    # remove rounding drift so the columns sum to zero
    Xc -= Xc.mean(axis=0)
    S = Z.T @ block.penalty @ Z
    return BasisBlock(block.spec, Xc, (S + S.T) / 2.0, True, c, Z)


def penalty_quadratic(block: BasisBlock, beta) -> float:
    beta = np.asarray(beta, float)
    if beta.shape != (block.width,):
        raise SplineError(f"beta has shape {beta.shape}, expected ({block.width},)")
    return float(beta @ block.penalty @ beta)
