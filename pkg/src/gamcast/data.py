"""Loading of daily death-count series and exploratory summaries.

Input files are plain CSV with a ``date,deaths[,region]`` header. A series
must cover consecutive days with exactly one non-negative integer count per
day; anything else is rejected rather than repaired.
"""
from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats


class DataError(ValueError):
    """Raised when an input series violates the ingest contract."""


def _frozen(a, dtype):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DailySeries:
    """Consecutive daily counts for one region."""

    region: str
    dates: tuple
    deaths: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "deaths", _frozen(self.deaths, np.int64))
        if len(self.dates) == 0:
            raise DataError("series is empty")
        if len(self.dates) != self.deaths.shape[0]:
            raise DataError("dates and deaths differ in length")
        if np.any(self.deaths < 0):
            raise DataError("negative death count")
        for a, b in zip(self.dates[:-1], self.dates[1:]):
            step = (b - a).days
            if step != 1:
                raise DataError(f"date gap between {a} and {b}; days must be consecutive")

    def __len__(self):
        return len(self.dates)

    def __eq__(self, other):
        if not isinstance(other, DailySeries):
            return NotImplemented
        return (self.region == other.region and self.dates == other.dates
                and np.array_equal(self.deaths, other.deaths))

    @property
    def first(self) -> dt.date:
        return self.dates[0]

    @property
    def last(self) -> dt.date:
        return self.dates[-1]


def _parse_date(text, lineno):
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"line {lineno}: unparsable date {text!r}") from None


def _parse_count(text, lineno):
    s = text.strip()
    if not s or not (s.isdigit() or (s[0] == "+" and s[1:].isdigit())):
        raise DataError(f"line {lineno}: count {text!r} is not a non-negative integer")
    return int(s)


def load_series(path, region=None) -> DailySeries:
    """Read a ``date,deaths[,region]`` CSV into a validated series.

    When the file carries a ``region`` column and ``region`` is given, only
    matching rows are kept. Rows may appear in any order; duplicated dates
    and gaps are errors.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if "date" not in header or "deaths" not in header:
            raise DataError(f"{path}: header must contain 'date' and 'deaths'")
        i_date, i_deaths = header.index("date"), header.index("deaths")
        i_region = header.index("region") if "region" in header else None
        rows = {}
        labels = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise DataError(f"line {lineno}: expected {len(header)} fields")
            if i_region is not None:
                label = row[i_region].strip()
                if region is not None and label.lower() != region.lower():
                    continue
                labels.add(label)
            day = _parse_date(row[i_date], lineno)
            if day in rows:
                raise DataError(f"line {lineno}: duplicate date {day}")
            rows[day] = _parse_count(row[i_deaths], lineno)
    if not rows:
        raise DataError(f"{path}: no observations")
    if region is None:
        region = labels.pop() if len(labels) == 1 else path.stem
    if len(labels) > 1:
        raise DataError(f"{path}: several regions present, pass one explicitly")
    dates = sorted(rows)
    return DailySeries(region, dates, [rows[d] for d in dates])


def write_series(series: DailySeries, path) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write("date,deaths,region\n")
        for d, y in zip(series.dates, series.deaths):
            fh.write(f"{d.isoformat()},{int(y)},{series.region}\n")


@dataclass(frozen=True, eq=False)
class CovariateTable:
    """Per-day covariates: day index relative to an anchor and calendar cycles.

    ``dow`` is the ISO weekday (Monday=1). ``biweek`` (1..14) and ``dom``
    (1..30) are free-running cycles that start at 1 on the first row.
    """

    day: np.ndarray
    dow: np.ndarray
    biweek: np.ndarray
    dom: np.ndarray

    def __post_init__(self):
        for name in ("day", "dow", "biweek", "dom"):
            object.__setattr__(self, name, _frozen(getattr(self, name), np.int64))

    def __len__(self):
        return self.day.shape[0]

    def column(self, name) -> np.ndarray:
        if name not in ("day", "dow", "biweek", "dom"):
            raise KeyError(f"unknown covariate {name!r}")
        return getattr(self, name)

    def slice(self, idx) -> "CovariateTable":
        return CovariateTable(self.day[idx], self.dow[idx], self.biweek[idx], self.dom[idx])


def covariates_for_dates(dates, anchor: dt.date, start=None) -> CovariateTable:
    """Covariates for consecutive ``dates``; ``start`` fixes where the free cycles read 1."""
    start = dates[0] if start is None else start
    day = np.array([(d - anchor).days for d in dates])
    offset = np.array([(d - start).days for d in dates])
    dow = np.array([d.isoweekday() for d in dates])
    return CovariateTable(day, dow, offset % 14 + 1, offset % 30 + 1)


def derive_covariates(series: DailySeries, anchor: dt.date) -> CovariateTable:
    return covariates_for_dates(series.dates, anchor)


@dataclass(frozen=True)
class EdaSummary:
    mean: float
    variance: float
    dispersion_index: float | None
    quartiles: tuple
    outliers: list
    hist_edges: np.ndarray = field(repr=False)
    hist_counts: np.ndarray = field(repr=False)
    density_x: np.ndarray = field(repr=False)
    density: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "variance": self.variance,
            "dispersion_index": self.dispersion_index,
            "quartiles": list(self.quartiles),
            "outliers": [{"date": d.isoformat(), "deaths": int(y)} for d, y in self.outliers],
            "histogram": {"edges": self.hist_edges.tolist(), "counts": self.hist_counts.tolist()},
        }


def summary_stats(series: DailySeries, grid_size=256) -> EdaSummary:
    """Overdispersion, box-plot and histogram/density summaries of the counts."""
    y = series.deaths.astype(float)
    if y.size < 2:
        raise DataError("need at least two observations for a variance")
    mean = float(y.mean())
    var = float(y.var(ddof=1))
    disp = var / mean if mean > 0 else None
    q1, med, q3 = (float(v) for v in np.percentile(y, [25, 50, 75]))
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    outliers = [(d, int(v)) for d, v in zip(series.dates, series.deaths) if v < lo or v > hi]
    counts, edges = np.histogram(y, bins="sturges")
    if var > 0:
        kde = stats.gaussian_kde(y, bw_method="silverman")
        bw = math.sqrt(kde.covariance[0, 0])
        gx = np.linspace(y.min() - 3 * bw, y.max() + 3 * bw, grid_size)
        dens = kde(gx)
    else:
        # degenerate sample: no density estimate
        gx = dens = np.empty(0)
    return EdaSummary(mean, var, disp, (q1, med, q3), outliers, edges, counts, gx, dens)


@dataclass(frozen=True)
class Decomposition:
    observed: np.ndarray
    trend: np.ndarray
    seasonal: np.ndarray
    random: np.ndarray
    period: int
    figure: np.ndarray


def classical_decompose(series: DailySeries, period: int) -> Decomposition:
    """Additive moving-average decomposition (trend + periodic seasonal + residual).

    Even periods use the half-weight endpoints filter, so the window is
    always centred. Trend and residual are NaN where the filter does not fit.
    """
    x = series.deaths.astype(float) if isinstance(series, DailySeries) else np.asarray(series, float)
    period = int(period)
    if period < 2:
        raise DataError("period must be at least 2")
    n = x.size
    if n < 2 * period:
        raise DataError(f"series of length {n} shorter than two periods ({period})")
    if period % 2 == 0:
        w = np.r_[0.5, np.ones(period - 1), 0.5] / period
    else:
        w = np.ones(period) / period
    half = (w.size - 1) // 2
    trend = np.full(n, np.nan)
    trend[half:n - half] = np.correlate(x, w, mode="valid")
    detr = x - trend
    pos = np.arange(n) % period
    means = np.array([np.nanmean(detr[pos == p]) for p in range(period)])
    figure = means - means.mean()
    seasonal = figure[pos]
    return Decomposition(x, trend, seasonal, x - trend - seasonal, period, figure)
