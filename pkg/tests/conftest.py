import datetime as dt

import numpy as np
import pytest

from gamcast.data import DailySeries

START = dt.date(2020, 1, 31)


def make_series(counts, start=START, region="test"):
    counts = np.asarray(counts, dtype=int)
    dates = tuple(start + dt.timedelta(days=i) for i in range(counts.size))
    return DailySeries(region, dates, counts)


def write_csv(path, counts, start=START, region=None):
    lines = ["date,deaths" + (",region" if region else "")]
    for i, c in enumerate(counts):
        row = f"{start + dt.timedelta(days=i)},{int(c)}"
        lines.append(row + (f",{region}" if region else ""))
    path.write_text("\n".join(lines) + "\n")
    return path


def epidemic_mean(n, peak=85, width=22, weekly=0.25, base=1.0, height=3.2):
    t = np.arange(n)
    return np.exp(base + height * np.exp(-0.5 * ((t - peak) / width) ** 2)
                  + weekly * np.sin(2 * np.pi * t / 7))


@pytest.fixture
def nb_series():
    """146 days of overdispersed counts with a single wave and a weekly cycle."""
    rng = np.random.default_rng(0)
    mu = epidemic_mean(146)
    y = rng.negative_binomial(8, 8 / (mu + 8))
    return make_series(y)


ACCEPTANCE = []


def record(name, ok, detail=""):
    """Log one acceptance criterion outcome for the end-of-run summary."""
    line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
