"""Performance metrics for equity curves and report writers."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from datetime import date
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .indicators import ols_fit

TRADING_DAYS = 252
ZERO_VOL = 1e-12
METRIC_NAMES = ("annualized_return", "cumulative_return", "annualized_volatility",
                "sharpe", "calmar", "stability", "max_drawdown")


class UndefinedMetric(ValueError):
    pass


@dataclass
class EquityCurve:
    dates: list
    assets: np.ndarray
    rewards: np.ndarray = field(default_factory=lambda: np.zeros(0))
    costs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    actions: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self) -> None:
        self.assets = np.asarray(self.assets, dtype=float)
        if len(self.dates) != len(self.assets):
            raise ValueError("dates and assets differ in length")
        if np.any(self.assets <= 0):
            raise ValueError("asset values must be strictly positive")
        if any(a >= b for a, b in zip(self.dates, self.dates[1:])):
            raise ValueError("dates must be strictly increasing")

    def scaled(self, c: float) -> EquityCurve:
        return EquityCurve(list(self.dates), self.assets * c, self.rewards, self.costs * c, self.actions)

    def window(self, start: int, stop: int) -> EquityCurve:
        return EquityCurve(list(self.dates[start:stop]), self.assets[start:stop])


def _assets(curve: EquityCurve | Sequence[float]) -> np.ndarray:
    a = curve.assets if isinstance(curve, EquityCurve) else np.asarray(curve, dtype=float)
    if np.any(a <= 0):
        raise ValueError("asset values must be strictly positive")
    return a


def daily_returns(curve) -> np.ndarray:
    a = _assets(curve)
    if len(a) < 2:
        raise ValueError("need at least two points")
    return a[1:] / a[:-1] - 1.0


def cumulative_return(curve) -> float:
    a = _assets(curve)
    if len(a) < 2:
        raise ValueError("need at least two points")
    return float(a[-1] / a[0] - 1.0)


def annualized_return(curve) -> float:
    a = _assets(curve)
    if len(a) < 2:
        raise ValueError("need at least two points")
    n = len(a) - 1
    try:
        return float(math.exp(math.log(a[-1] / a[0]) * TRADING_DAYS / n) - 1.0)
    except OverflowError:
        # a huge gain over very few periods annualizes past the float range
        return math.inf


def annualized_volatility(returns) -> float:
    r = np.asarray(returns, dtype=float)
    if len(r) < 2:
        raise ValueError("need at least two returns")
    if np.all(r == r[0]):
        return 0.0
    return float(np.std(r, ddof=1) * math.sqrt(TRADING_DAYS))


def sharpe(returns, risk_free: float = 0.0) -> float:
    """Annualized mean excess return over annualized volatility; ``risk_free`` is an annual rate."""
    r = np.asarray(returns, dtype=float)
    vol = annualized_volatility(r)
    if vol <= ZERO_VOL:
        raise UndefinedMetric("Sharpe ratio undefined for zero volatility")
    excess = r - risk_free / TRADING_DAYS
    return float(excess.mean() * TRADING_DAYS / vol)


def max_drawdown(curve) -> float:
    a = _assets(curve)
    if len(a) < 1:
        raise ValueError("need at least one point")
    peaks = np.maximum.accumulate(a)
    return float(np.min(a / peaks - 1.0))


def calmar(curve) -> float:
    mdd = max_drawdown(curve)
    if mdd >= 0:
        raise UndefinedMetric("Calmar ratio undefined without a drawdown")
    return annualized_return(curve) / abs(mdd)


def stability(curve) -> float:
    """R^2 of a straight-line fit to cumulative log returns against time."""
    a = _assets(curve)
    if len(a) < 3:
        raise ValueError("need at least three points")
    cumlog = np.log(a / a[0])
    return ols_fit(cumlog, np.arange(len(a), dtype=float)).r2


def baseline_curve(index: Sequence[float], dates: Sequence, initial_balance: float = 1e6) -> EquityCurve:
    """Buy-and-hold equity of the index scaled to the initial balance."""
    idx = np.asarray(index, dtype=float)
    if np.any(idx <= 0):
        raise ValueError("index levels must be positive")
    return EquityCurve(list(dates), initial_balance * idx / idx[0])


@dataclass
class MetricsReport:
    annualized_return: float | None
    cumulative_return: float | None
    annualized_volatility: float | None
    sharpe: float | None
    calmar: float | None
    stability: float | None
    max_drawdown: float | None
    start: str = ""
    end: str = ""

    def values(self) -> dict[str, float | None]:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def _safe(fn, *args):
    try:
        return fn(*args)
    except (UndefinedMetric, ValueError):
        return None


def metrics(curve: EquityCurve, risk_free: float = 0.0) -> MetricsReport:
    returns = daily_returns(curve) if len(curve.assets) >= 2 else np.zeros(0)
    return MetricsReport(
        annualized_return=_safe(annualized_return, curve),
        cumulative_return=_safe(cumulative_return, curve),
        annualized_volatility=_safe(annualized_volatility, returns),
        sharpe=_safe(sharpe, returns, risk_free),
        calmar=_safe(calmar, curve),
        stability=_safe(stability, curve),
        max_drawdown=_safe(max_drawdown, curve),
        start=str(curve.dates[0]) if len(curve.dates) else "",
        end=str(curve.dates[-1]) if len(curve.dates) else "",
    )


def mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Metric-wise arithmetic mean, skipping undefined entries."""
    out = {}
    for name in METRIC_NAMES:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        out[name] = float(np.mean(vals)) if vals else None
    return MetricsReport(**out, start=reports[0].start, end=reports[0].end)


def yearly_windows(dates: Sequence[date], month: int = 7, day: int = 4) -> list[tuple[str, int, int]]:
    """(label, start, stop) index windows running from ``month/day`` to the next year's."""
    if not dates:
        return []
    first, last = dates[0], dates[-1]
    year = first.year if (first.month, first.day) >= (month, day) else first.year - 1
    windows = []
    while date(year, month, day) <= last:
        lo, hi = date(year, month, day), date(year + 1, month, day)
        idx = [i for i, d in enumerate(dates) if lo <= d < hi]
        if idx:
            # include the previous close as the base of the window's return
            start = max(idx[0] - 1, 0)
            windows.append((f"{lo.isoformat()}..{hi.isoformat()}", start, idx[-1] + 1))
        year += 1
    return windows


def yearly_returns(curve: EquityCurve) -> dict[str, float | None]:
    out = {}
    for label, start, stop in yearly_windows(list(curve.dates)):
        out[label] = _safe(annualized_return, curve.window(start, stop))
    return out


def _fmt(x: float | None) -> str:
    return "n/a" if x is None else f"{x:.6g}"


def _num(x: float | None):
    return None if x is None else float(f"{x:.6g}")


def render_table(reports: Mapping[str, MetricsReport]) -> str:
    header = ["strategy", *METRIC_NAMES]
    rows = [[name, *(_fmt(v) for v in r.values().values())] for name, r in reports.items()]
    widths = [max(len(str(row[i])) for row in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)) for row in [header, *rows]]
    return "\n".join(lines)


def write_equity_csv(path: str | os.PathLike, curve: EquityCurve) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "asset", "reward", "cost"])
        for i, d in enumerate(curve.dates):
            reward = _fmt(curve.rewards[i - 1]) if 0 < i <= len(curve.rewards) else ""
            cost = _fmt(curve.costs[i - 1]) if 0 < i <= len(curve.costs) else ""
            w.writerow([str(d), _fmt(curve.assets[i]), reward, cost])


def report(curves: Mapping[str, EquityCurve], out_dir: str | os.PathLike | None = None,
           risk_free: float = 0.0, extra_rows: Mapping[str, MetricsReport] | None = None) -> dict[str, MetricsReport]:
    """Seven metrics per curve; optionally writes ``metrics.json``, ``equity_<name>.csv`` and ``yearly.csv``."""
    if not curves and not extra_rows:
        raise ValueError("no curves to report")
    reports = {name: metrics(c, risk_free) for name, c in curves.items()}
    reports.update(extra_rows or {})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        payload = {name: {k: _num(v) for k, v in r.values().items()} for name, r in reports.items()}
        (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n")
        for name, c in curves.items():
            write_equity_csv(out / f"equity_{name}.csv", c)
        yearly = {name: yearly_returns(c) for name, c in curves.items()}
        labels = sorted({lab for y in yearly.values() for lab in y})
        with (out / "yearly.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["strategy", *labels])
            for name, y in yearly.items():
                w.writerow([name, *(_fmt(y.get(lab)) for lab in labels)])
    return reports


def report_dict(r: MetricsReport) -> dict:
    return asdict(r)
