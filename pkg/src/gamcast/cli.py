"""Command-line front end: ``gamcast {eda,fit,diagnose,peak,deconvolve}``.

Exit codes are 0 on success, 1 for usage errors, 2 for data or I/O errors
and 3 for numerical failures. Every output file is written atomically.
"""
from __future__ import annotations

import argparse
import datetime as dt
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
from scipy import linalg

from . import deconv, diagnostics, posterior
from . import family as fam
from .data import DataError, classical_decompose, derive_covariates, load_series, summary_stats
from .fitting import FitError, assemble_design, default_specs, optimize
from .splines import SplineError

PRESETS = {
    "canada": ("trend", "weekly", "monthly"),
    "quebec": ("trend", "weekly"),
    "ontario": ("trend", "weekly", "monthly"),
    "alberta": ("trend", "biweekly"),
}
FORMATS = ("csv", "json", "svg")
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    subcommand: str
    input: Path
    region: str | None
    formula: tuple
    family: str
    theta: float
    anchor: dt.date
    seed: int | None
    out: Path
    formats: tuple = ("csv", "json")
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------- output


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "NA"
    return "%.12g" % v


def csv_text(columns: dict) -> str:
    names = list(columns)
    cols = [list(columns[k]) for k in names]
    n = len(cols[0]) if cols else 0
    if any(len(c) != n for c in cols):
        raise ValueError("columns differ in length")
    lines = [",".join(names)]
    for i in range(n):
        lines.append(",".join(_fmt(c[i]) for c in cols))
    return "\n".join(lines) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, (dt.date, Path)):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default, allow_nan=True) + "\n"


@dataclass(frozen=True, eq=False)
class Panel:
    """Columns behind one figure; the first column is the horizontal axis."""
    name: str
    columns: dict
    kind: str = "line"
    title: str = ""


def svg_text(panel: Panel, width=640, height=400) -> str:
    """Minimal static SVG: polylines (or bars) for every non-x column."""
    names = list(panel.columns)
    x = np.asarray(panel.columns[names[0]], float)
    ys = [np.asarray(panel.columns[k], float) for k in names[1:]]
    pad = 40
    finite = np.concatenate([y[np.isfinite(y)] for y in ys]) if ys else np.zeros(1)
    ylo, yhi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if panel.kind == "bar":
        ylo = min(ylo, 0.0)
    if yhi <= ylo:
        yhi = ylo + 1.0
    xlo, xhi = (float(np.nanmin(x)), float(np.nanmax(x))) if x.size else (0.0, 1.0)
    if xhi <= xlo:
        xhi = xlo + 1.0

    def sx(v):
        return pad + (v - xlo) / (xhi - xlo) * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - ylo) / (yhi - ylo) * (height - 2 * pad)

    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<title>{escape(panel.title or panel.name)}</title>',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="12">'
        f'{escape(names[0])}</text>',
    ]
    for k, (name, y) in enumerate(zip(names[1:], ys)):
        color = colors[k % len(colors)]
        ok = np.isfinite(x) & np.isfinite(y)
        if panel.kind == "bar" and k == 0:
            bw = (width - 2 * pad) / max(x.size, 1) * 0.8
            for xi, yi in zip(x[ok], y[ok]):
                top, base = sy(max(yi, 0.0)), sy(min(yi, 0.0) if ylo < 0 else ylo)
                out.append(f'<rect x="{sx(xi) - bw / 2:.2f}" y="{top:.2f}" width="{bw:.2f}" '
                           f'height="{max(base - top, 0.0):.2f}" fill="{color}"/>')
        else:
            pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x[ok], y[ok]))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}">'
                       f'<title>{escape(name)}</title></polyline>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot(panel: Panel, out_dir, fmt: str) -> Path:
    """Write ``panel`` as ``<name>.csv`` or ``<name>.svg`` under ``out_dir``."""
    if fmt == "csv":
        path = Path(out_dir) / f"{panel.name}.csv"
        atomic_write(path, csv_text(panel.columns))
    elif fmt == "svg":
        path = Path(out_dir) / f"{panel.name}.svg"
        atomic_write(path, svg_text(panel))
    else:
        raise ValueError(f"unsupported plot format {fmt!r}")
    return path


def _emit(panels, cfg: RunConfig):
    written = []
    for p in panels:
        for fmt in ("csv", "svg"):
            if fmt in cfg.formats:
                written.append(emit_plot(p, cfg.out, fmt))
    return written


def smooth_panel(band: posterior.SmoothBand, name) -> Panel:
    return Panel(name, {"x": band.x, "mode": band.mode, "lo95": band.lower, "hi95": band.upper},
                 title=band.term)


# -------------------------------------------------------------- commands


def _load(cfg: RunConfig):
    series = load_series(cfg.input, cfg.region)
    return series, derive_covariates(series, cfg.anchor)


def _family(cfg: RunConfig) -> fam.Family:
    if cfg.family == "poisson":
        return fam.poisson()
    return fam.negbin(cfg.theta)


def _fit(cfg: RunConfig):
    series, cov = _load(cfg)
    design = assemble_design(cov, default_specs(cfg.formula, len(series)))
    fit = optimize(design, _family(cfg), series.deaths)
    return series, fit


def cmd_eda(cfg: RunConfig):
    series = load_series(cfg.input, cfg.region)
    summ = summary_stats(series)
    period = cfg.extra.get("period", 7)
    dec = classical_decompose(series, period)
    days = np.arange(len(series))
    dates = [d.isoformat() for d in series.dates]
    if "json" in cfg.formats:
        info = summ.to_dict()
        info.update(region=series.region, n=len(series), first=series.first, last=series.last,
                    decomposition={"period": period, "figure": dec.figure})
        atomic_write(cfg.out / "summary.json", json_text(info))
    panels = [
        Panel("series", {"day": days, "date": dates, "deaths": series.deaths}),
        Panel("decomposition", {"day": days, "observed": dec.observed, "trend": dec.trend,
                                "seasonal": dec.seasonal, "random": dec.random}),
        Panel("histogram", {"left": summ.hist_edges[:-1], "count": summ.hist_counts,
                            "right": summ.hist_edges[1:]}, kind="bar"),
        Panel("density", {"x": summ.density_x, "density": summ.density}),
    ]
    for p in panels:
        if "csv" in cfg.formats:
            emit_plot(p, cfg.out, "csv")
        if "svg" in cfg.formats and p.name != "series":
            emit_plot(p, cfg.out, "svg")
    if "svg" in cfg.formats:
        emit_plot(Panel("series", {"day": days, "deaths": series.deaths}), cfg.out, "svg")


def cmd_fit(cfg: RunConfig):
    series, fit = _fit(cfg)
    if cfg.extra.get("dump_design"):
        atomic_write(cfg.out / "design.json", json_text(fit.design.to_dict()))
    info = fit.to_dict()
    info.update(region=series.region, first=series.first, last=series.last, anchor=cfg.anchor)
    atomic_write(cfg.out / "fit.json", json_text(info))
    tb = posterior.trend_band(fit)
    curves = Panel("curves", {"day": fit.design.cov.day, "observed": series.deaths,
                              "fitted": fit.fitted, "trend": tb.mode, "trend_lo95": tb.lower,
                              "trend_hi95": tb.upper})
    atomic_write(cfg.out / "curves.csv", csv_text(curves.columns))
    panels = [smooth_panel(posterior.smooth_interval(fit, j), f"smooth_{name}")
              for j, name in enumerate(fit.design.formula)]
    _emit(panels, cfg)
    if "svg" in cfg.formats:
        emit_plot(curves, cfg.out, "svg")


def cmd_diagnose(cfg: RunConfig):
    series, fit = _fit(cfg)
    cb = diagnostics.check_bundle(fit, series.deaths, seed=cfg.seed)
    ac = diagnostics.acf(cb.residuals, cfg.extra.get("max_lag"))
    panels = [
        Panel("qq", {"theoretical": cb.theoretical, "observed": cb.observed}),
        Panel("residual_histogram", {"left": cb.hist_edges[:-1], "count": cb.hist_counts,
                                     "right": cb.hist_edges[1:]}, kind="bar"),
        Panel("residuals_vs_eta", {"eta": cb.eta, "residual": cb.residuals}),
        Panel("response_vs_fitted", {"fitted": cb.fitted, "response": cb.response}),
        Panel("acf", {"lag": ac.lags, "acf": ac.values, "band": np.full(ac.lags.size, ac.band)},
              kind="bar"),
    ]
    _emit(panels, cfg)
    if "json" in cfg.formats:
        atomic_write(cfg.out / "diagnostics.json", json_text({
            "seed": cfg.seed, "n": cb.n, "acf_band": ac.band,
            "acf_significant_lags": ac.significant(), "fit": fit.to_dict()}))


def cmd_peak(cfg: RunConfig):
    series, fit = _fit(cfg)
    pk = posterior.peak_distribution(fit, cfg.extra.get("n_sim", 10_000), cfg.seed)
    tb = posterior.trend_band(fit)
    panels = [
        Panel("peak", {"day": pk.days, "probability": pk.day_probabilities}, kind="bar"),
        Panel("trend", {"x": tb.x, "mode": tb.mode, "lo95": tb.lower, "hi95": tb.upper}),
    ]
    _emit(panels, cfg)
    if "json" in cfg.formats:
        first = series.first
        atomic_write(cfg.out / "peak.json", json_text({
            "seed": cfg.seed, "n_sim": pk.n_sim, "mode_day": pk.mode_day,
            "mode_date": cfg.anchor + dt.timedelta(days=pk.mode_day),
            "interval_95": list(pk.interval_95), "first": first}))


def cmd_deconvolve(cfg: RunConfig):
    series = load_series(cfg.input, cfg.region)
    x = cfg.extra
    delay = deconv.delay_density(x["delay_mean"], x["delay_variance"], x["horizon"])
    mc = deconv.McmcConfig(iterations=x["iterations"], thin=x["thin"], burn_in=x["burn_in"],
                           seed=cfg.seed, family=cfg.family, lead_in=x["lead_in"])
    n_ext = len(series) + mc.lead_in
    specs = default_specs(cfg.formula, n_ext)
    if specs[0].kind != "cubic":
        raise UsageError("deconvolve formula must start with trend")
    chains = deconv.run_chains(series, specs, delay, mc, x["chains"], cfg.anchor, x["workers"])
    samples = deconv.combine(chains)
    prof = deconv.infection_profile(samples)
    panel = Panel("profile", {"day": prof.days, "median": prof.median,
                              "lo80": prof.band80[0], "hi80": prof.band80[1],
                              "lo95": prof.band95[0], "hi95": prof.band95[1],
                              "peak_prob": prof.peak_probs, "curvature": prof.curvature,
                              "gradient": prof.gradient})
    _emit([panel], cfg)
    if "json" in cfg.formats:
        info = {"seed": cfg.seed, "chains": len(chains), "n_kept": samples.n_kept,
                "acceptance_rate": samples.acceptance_rate, "warning": samples.warning,
                "peak_day": prof.peak_day(), "theta_median": float(np.median(samples.theta)),
                "delay": {"mean": delay.mean, "variance": delay.variance, "shape": delay.shape,
                          "rate": delay.rate, "horizon": delay.horizon}}
        if len(chains) > 1:
            logf = [c.log_profiles() for c in chains]
            probes = np.linspace(0, logf[0].shape[1] - 1, 5).round().astype(int)
            info["split_rhat"] = {int(prof.days[p]): deconv.split_rhat([lf[:, p] for lf in logf])
                                  for p in probes}
        atomic_write(cfg.out / "deconvolve.json", json_text(info))


COMMANDS = {"eda": cmd_eda, "fit": cmd_fit, "diagnose": cmd_diagnose, "peak": cmd_peak,
            "deconvolve": cmd_deconvolve}
STOCHASTIC = {"diagnose", "peak", "deconvolve"}


# ---------------------------------------------------------------- parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _date(text):
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO date: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gamcast", description="GAM fitting, peak inference and deconvolution "
                                            "for daily count series.")
    p.add_argument("--errors", choices=("text", "json"), default="text",
                   help="format of error reports on standard error")
    sub = p.add_subparsers(dest="subcommand", parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--input", required=True, type=Path, help="CSV with date,deaths[,region]")
        s.add_argument("--region")
        s.add_argument("--out", type=Path, default=Path("."))
        s.add_argument("--format", default="csv,json",
                       help="comma-separated subset of csv,json,svg")
        s.add_argument("--errors", choices=("text", "json"), default=None)
        if name == "eda":
            s.add_argument("--period", type=int, default=7)
            continue
        s.add_argument("--preset", choices=sorted(PRESETS))
        s.add_argument("--formula", help="comma-separated smooths from trend,weekly,biweekly,monthly")
        s.add_argument("--family", choices=("negbin", "poisson"), default="negbin")
        s.add_argument("--theta", type=float, default=1.0, help="starting dispersion")
        s.add_argument("--anchor", type=_date, default=deconv.DEFAULT_ANCHOR)
        if name in STOCHASTIC:
            s.add_argument("--seed", type=int)
        if name == "fit":
            s.add_argument("--dump-design", action="store_true")
        if name == "diagnose":
            s.add_argument("--max-lag", type=int)
        if name == "peak":
            s.add_argument("--n-sim", type=int, default=10_000)
        if name == "deconvolve":
            s.add_argument("--delay-mean", type=float, default=17.8)
            s.add_argument("--delay-variance", type=float, default=71.2)
            s.add_argument("--horizon", type=int, default=100)
            s.add_argument("--lead-in", type=int, default=15)
            s.add_argument("--iterations", type=int, default=100_000)
            s.add_argument("--thin", type=int, default=30)
            s.add_argument("--burn-in", type=int)
            s.add_argument("--chains", type=int, default=1)
            s.add_argument("--workers", type=int, default=1)
    return p


def _config(ns) -> RunConfig:
    if ns.subcommand is None:
        raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
    formats = tuple(f.strip() for f in ns.format.split(",") if f.strip())
    bad = set(formats) - set(FORMATS)
    if bad or not formats:
        raise UsageError(f"--format must be a subset of {','.join(FORMATS)}")
    formula, seed, extra = (), None, {}
    if ns.subcommand == "eda":
        extra["period"] = ns.period
    else:
        if ns.formula:
            formula = tuple(f.strip() for f in ns.formula.split(",") if f.strip())
        elif ns.preset:
            formula = PRESETS[ns.preset]
        elif ns.region and ns.region.lower() in PRESETS:
            formula = PRESETS[ns.region.lower()]
        elif ns.subcommand == "deconvolve":
            formula = ("trend", "weekly")
        if not formula:
            raise UsageError("give --formula or --preset")
        if ns.theta <= 0:
            raise UsageError("--theta must be positive")
    if ns.subcommand in STOCHASTIC:
        seed = ns.seed
        if seed is None:
            env = os.environ.get("GAMCAST_SEED")
            if env is None:
                raise UsageError("--seed (or GAMCAST_SEED) is required")
            try:
                seed = int(env)
            except ValueError:
                raise UsageError(f"GAMCAST_SEED is not an integer: {env!r}") from None
        if seed < 0:
            raise UsageError("seed must be non-negative")
    if ns.subcommand == "fit":
        extra["dump_design"] = ns.dump_design
    if ns.subcommand == "diagnose":
        extra["max_lag"] = ns.max_lag
    if ns.subcommand == "peak":
        extra["n_sim"] = ns.n_sim
    if ns.subcommand == "deconvolve":
        if ns.chains < 1 or ns.workers < 1:
            raise UsageError("--chains and --workers must be positive")
        extra.update(delay_mean=ns.delay_mean, delay_variance=ns.delay_variance,
                     horizon=ns.horizon, lead_in=ns.lead_in, iterations=ns.iterations,
                     thin=ns.thin, burn_in=ns.burn_in, chains=ns.chains, workers=ns.workers)
    return RunConfig(ns.subcommand, ns.input, ns.region, formula,
                     getattr(ns, "family", "negbin"), getattr(ns, "theta", 1.0),
                     getattr(ns, "anchor", deconv.DEFAULT_ANCHOR), seed, ns.out, formats, extra)


def _report(exc, code, as_json, stream):
    if as_json:
        stream.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                 "exit_code": code}, sort_keys=True) + "\n")
    else:
        stream.write(f"gamcast: {exc}\n")


def run(argv=None, stderr=None) -> int:
    """Run one command; returns the process exit code."""
    stderr = sys.stderr if stderr is None else stderr
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--errors=json" in argv or any(
        a == "--errors" and i + 1 < len(argv) and argv[i + 1] == "json" for i, a in enumerate(argv))
    try:
        ns = build_parser().parse_args(argv)
        cfg = _config(ns)
        COMMANDS[cfg.subcommand](cfg)
    except UsageError as exc:
        _report(exc, EXIT_USAGE, as_json, stderr)
        return EXIT_USAGE
    except (DataError, SplineError, OSError) as exc:
        _report(exc, EXIT_DATA, as_json, stderr)
        return EXIT_DATA
    except (FitError, FloatingPointError, linalg.LinAlgError) as exc:
        _report(exc, EXIT_NUMERIC, as_json, stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        _report(exc, EXIT_USAGE, as_json, stderr)
        return EXIT_USAGE
    return EXIT_OK


def main() -> None:
    sys.exit(run())
