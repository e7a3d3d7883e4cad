"""Technical factors and the RSRS (resistance/support relative strength) timing score.

Every rolling quantity here is computed independently per window, so appending a
day never changes earlier outputs.

Indicator parameters:

=========  ====================================================
factor     definition
=========  ====================================================
MACD       EMA12(close) - EMA26(close), EMA seeded at first close
SMA30/60   simple mean of the last 30 / 60 closes
BOLL       SMA20 +/- 2 * population stddev over 20 closes
RSI        14-period, Wilder smoothing
CCI        20-period typical price, 0.015 scaling
ADX        14-period, Wilder smoothing
=========  ====================================================
"""

from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .market_data import Universe

WARMUP_DAYS = 60
TECHNICAL_COLUMNS = ("macd", "sma30", "sma60", "boll_upper", "boll_lower", "rsi", "cci", "adx")
# std <= this * max(1, |mean|) counts as a degenerate (constant) window
DEGENERATE_STD = 1e-12


class DegenerateRegressor(ValueError):
    pass


@dataclass(frozen=True)
class OlsFit:
    alpha: float
    beta: float
    r2: float


def ols_fit(y: Sequence[float], x: Sequence[float]) -> OlsFit:
    """Least-squares fit of ``y = alpha + beta * x``.

    ``r2`` is defined as 0 when ``y`` has no variance.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if y.shape != x.shape or y.ndim != 1:
        raise ValueError(f"length mismatch: {y.shape} vs {x.shape}")
    if len(x) < 2:
        raise ValueError("need at least two points")
    xm, ym = x.mean(), y.mean()
    dx, dy = x - xm, y - ym
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise DegenerateRegressor("regressor has zero variance")
    beta = float(dx @ dy) / sxx
    alpha = ym - beta * xm
    sst = float(dy @ dy)
    if sst == 0.0:
        return OlsFit(float(alpha), beta, 0.0)
    resid = dy - beta * dx
    r2 = 1.0 - float(resid @ resid) / sst
    return OlsFit(float(alpha), beta, min(max(r2, 0.0), 1.0))


def rolling_ols(y: np.ndarray, x: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-day (beta, r2) of ``y`` on ``x`` over trailing windows; NaN during warm-up."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if window < 2:
        raise ValueError("window must be at least 2")
    if window > len(x):
        raise ValueError(f"window {window} exceeds series length {len(x)}")
    beta = np.full(len(x), np.nan)
    r2 = np.full(len(x), np.nan)
    xw = sliding_window_view(x, window)
    yw = sliding_window_view(y, window)
    dx = xw - xw.mean(axis=1, keepdims=True)
    dy = yw - yw.mean(axis=1, keepdims=True)
    sxx = np.einsum("ij,ij->i", dx, dx)
    sxy = np.einsum("ij,ij->i", dx, dy)
    syy = np.einsum("ij,ij->i", dy, dy)
    ok = sxx > 0
    b = np.where(ok, sxy / np.where(ok, sxx, 1.0), np.nan)
    resid = dy - b[:, None] * dx
    sse = np.einsum("ij,ij->i", resid, resid)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(syy > 0, 1.0 - sse / np.where(syy > 0, syy, 1.0), 0.0)
    r = np.where(ok, np.clip(r, 0.0, 1.0), np.nan)
    beta[window - 1:] = b
    r2[window - 1:] = r
    return beta, r2


def rsrs_slope(u: Universe, ticker: str, l: int) -> tuple[np.ndarray, np.ndarray]:
    """Slope (and R^2) of daily highs regressed on daily lows over the last ``l`` days."""
    if l < 2:
        raise ValueError("regression window must be at least 2")
    if l > u.n_days:
        raise ValueError(f"regression window {l} exceeds {u.n_days} days")
    j = u.column(ticker)
    return rolling_ols(u.high[:, j], u.low[:, j], l)


@dataclass(frozen=True)
class RsrsSeries:
    beta: np.ndarray
    r2: np.ndarray
    std: np.ndarray
    cor: np.ndarray
    rightdev: np.ndarray


def rsrs_scores(beta: np.ndarray, r2: np.ndarray, m: int) -> RsrsSeries:
    """Standardize slopes over the last ``m`` defined values (current day included).

    Uses the population standard deviation. Windows with (numerically) constant
    slopes leave the score undefined.
    """
    beta = np.asarray(beta, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    if m < 2:
        raise ValueError("standardization window must be at least 2")
    if beta.shape != r2.shape:
        raise ValueError("beta and r2 must be aligned")
    std = np.full(beta.shape, np.nan)
    idx = np.flatnonzero(~np.isnan(beta))
    if len(idx) >= m:
        vals = beta[idx]
        win = sliding_window_view(vals, m)
        mu = win.mean(axis=1)
        sigma = np.sqrt(((win - mu[:, None]) ** 2).mean(axis=1))
        ok = sigma > DEGENERATE_STD * np.maximum(1.0, np.abs(mu))
        z = np.where(ok, (vals[m - 1:] - mu) / np.where(ok, sigma, 1.0), np.nan)
        std[idx[m - 1:]] = z
    cor = std * r2
    rightdev = cor * beta
    return RsrsSeries(beta=beta, r2=r2, std=std, cor=cor, rightdev=rightdev)


def rsrs_series(u: Universe, ticker: str, l: int = 10, m: int = 300) -> RsrsSeries:
    beta, r2 = rsrs_slope(u, ticker, l)
    return rsrs_scores(beta, r2, m)


def rightdev_panel(u: Universe, l: int = 10, m: int = 300) -> np.ndarray:
    """T x D right-deviated scores, NaN where undefined."""
    return np.column_stack([rsrs_series(u, t, l, m).rightdev for t in u.tickers])


class TimingSignal(enum.Enum):
    BUY = "buy"
    SELL = "sell"
    HOLD = "hold"


def rsrs_signal(rightdev: float, rs_buy: float = 1.0, rs_sell: float = -0.4) -> TimingSignal:
    if not rs_sell < rs_buy:
        raise ValueError("rs_sell must be below rs_buy")
    if rightdev is None or np.isnan(rightdev):
        return TimingSignal.HOLD
    if rightdev > rs_buy:
        return TimingSignal.BUY
    if rightdev < rs_sell:
        return TimingSignal.SELL
    return TimingSignal.HOLD


def _rolling(values: np.ndarray, window: int, fn) -> np.ndarray:
    out = np.full(len(values), np.nan)
    if len(values) >= window:
        out[window - 1:] = fn(sliding_window_view(values, window), axis=1)
    return out


def sma(values: np.ndarray, window: int) -> np.ndarray:
    return _rolling(np.asarray(values, dtype=float), window, np.mean)


def ema(values: np.ndarray, span: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    a = 2.0 / (span + 1.0)
    out = np.empty_like(values)
    out[0] = values[0]
    for t in range(1, len(values)):
        out[t] = a * values[t] + (1.0 - a) * out[t - 1]
    return out


def wilder(values: np.ndarray, period: int, start: int) -> np.ndarray:
    """Wilder average: simple mean of ``values[start:start+period]``, then recursive."""
    out = np.full(len(values), np.nan)
    first = start + period - 1
    if first >= len(values):
        return out
    out[first] = values[start:start + period].mean()
    for t in range(first + 1, len(values)):
        out[t] = (out[t - 1] * (period - 1) + values[t]) / period
    return out


def macd(close: np.ndarray) -> np.ndarray:
    return ema(close, 12) - ema(close, 26)


def bollinger(close: np.ndarray, window: int = 20, k: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    close = np.asarray(close, dtype=float)
    mid = sma(close, window)
    sd = _rolling(close, window, np.std)
    return mid + k * sd, mid - k * sd


def rsi(close: np.ndarray, period: int = 14) -> np.ndarray:
    close = np.asarray(close, dtype=float)
    delta = np.concatenate([[0.0], np.diff(close)])
    gain = wilder(np.maximum(delta, 0.0), period, 1)
    loss = wilder(np.maximum(-delta, 0.0), period, 1)
    out = np.full(len(close), np.nan)
    ok = ~np.isnan(gain)
    g, l = gain[ok], loss[ok]
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(l > 0, 100.0 - 100.0 / (1.0 + g / np.where(l > 0, l, 1.0)), np.where(g > 0, 100.0, 50.0))
    out[ok] = val
    return out


def cci(high: np.ndarray, low: np.ndarray, close: np.ndarray, period: int = 20) -> np.ndarray:
    tp = (np.asarray(high, float) + np.asarray(low, float) + np.asarray(close, float)) / 3.0
    out = np.full(len(tp), np.nan)
    if len(tp) < period:
        return out
    win = sliding_window_view(tp, period)
    mean = win.mean(axis=1)
    mad = np.abs(win - mean[:, None]).mean(axis=1)
    dev = tp[period - 1:] - mean
    out[period - 1:] = np.where(mad > 0, dev / (0.015 * np.where(mad > 0, mad, 1.0)), 0.0)
    return out


def adx(high: np.ndarray, low: np.ndarray, close: np.ndarray, period: int = 14) -> np.ndarray:
    high, low, close = (np.asarray(a, dtype=float) for a in (high, low, close))
    n = len(close)
    tr = np.zeros(n)
    plus_dm = np.zeros(n)
    minus_dm = np.zeros(n)
    up = high[1:] - high[:-1]
    down = low[:-1] - low[1:]
    plus_dm[1:] = np.where((up > down) & (up > 0), up, 0.0)
    minus_dm[1:] = np.where((down > up) & (down > 0), down, 0.0)
    tr[1:] = np.maximum.reduce([high[1:] - low[1:], np.abs(high[1:] - close[:-1]), np.abs(low[1:] - close[:-1])])
    # Wilder running sums are proportional to Wilder averages; DI ratios are unaffected.
    s_tr = wilder(tr, period, 1)
    s_plus = wilder(plus_dm, period, 1)
    s_minus = wilder(minus_dm, period, 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        pdi = np.where(s_tr > 0, 100.0 * s_plus / s_tr, 0.0)
        mdi = np.where(s_tr > 0, 100.0 * s_minus / s_tr, 0.0)
        total = pdi + mdi
        dx = np.where(total > 0, 100.0 * np.abs(pdi - mdi) / np.where(total > 0, total, 1.0), 0.0)
    dx[np.isnan(s_tr)] = np.nan
    return wilder(dx, period, period)


def technical_block(u: Universe, ticker: str) -> np.ndarray:
    """T x 8 array of technical factors in ``TECHNICAL_COLUMNS`` order (NaN in warm-up)."""
    if u.n_days < WARMUP_DAYS:
        raise ValueError(f"need at least {WARMUP_DAYS} days, got {u.n_days}")
    j = u.column(ticker)
    high, low, close = u.high[:, j], u.low[:, j], u.close[:, j]
    upper, lower = bollinger(close)
    return np.column_stack([
        macd(close),
        sma(close, 30),
        sma(close, 60),
        upper,
        lower,
        rsi(close),
        cci(high, low, close),
        adx(high, low, close),
    ])


def fill_warmup(values: np.ndarray) -> np.ndarray:
    """Back-fill leading NaNs with the first defined value per column; other NaNs -> 0."""
    values = np.array(values, dtype=float, copy=True)
    squeeze = values.ndim == 1
    if squeeze:
        values = values[:, None]
    for c in range(values.shape[1]):
        col = values[:, c]
        defined = np.flatnonzero(~np.isnan(col))
        if len(defined):
            col[: defined[0]] = col[defined[0]]
        col[np.isnan(col)] = 0.0
    return values[:, 0] if squeeze else values


def write_rsrs_dump(path: str | os.PathLike, u: Universe, ticker: str, series: RsrsSeries,
                    rs_buy: float = 1.0, rs_sell: float = -0.4) -> None:
    """Audit CSV ``date,beta,r2,std,cor,rightdev,signal`` (undefined values left empty)."""
    def fmt(v: float) -> str:
        return "" if np.isnan(v) else repr(float(v))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "beta", "r2", "std", "cor", "rightdev", "signal"])
        for i, day in enumerate(u.calendar):
            w.writerow([day.isoformat(), fmt(series.beta[i]), fmt(series.r2[i]), fmt(series.std[i]),
                        fmt(series.cor[i]), fmt(series.rightdev[i]),
                        rsrs_signal(series.rightdev[i], rs_buy, rs_sell).value])
