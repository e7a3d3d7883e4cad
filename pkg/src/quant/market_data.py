"""Daily OHLCV loading, calendar alignment, splitting and synthetic paths."""

from __future__ import annotations

import csv
import io
import logging
import os
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("date", "ticker", "open", "high", "low", "close", "volume")
FIELDS = ("open", "high", "low", "close", "volume")


class DataError(ValueError):
    """Raised for malformed or inconsistent market data."""


class FetchError(RuntimeError):
    def __init__(self, message: str, retryable: bool = False) -> None:
        super().__init__(message)
        self.retryable = retryable


@dataclass(frozen=True)
class Bar:
    date: date
    ticker: str
    open: float
    high: float
    low: float
    close: float
    volume: float

    def validate(self) -> None:
        prices = (self.open, self.high, self.low, self.close)
        if not all(np.isfinite(p) and p > 0 for p in prices):
            raise DataError(f"non-positive price on {self.date} for {self.ticker}")
        if not (np.isfinite(self.volume) and self.volume >= 0):
            raise DataError(f"negative volume on {self.date} for {self.ticker}")
        if self.low > min(self.open, self.close) or self.high < max(self.open, self.close):
            raise DataError(f"OHLC bounds violated on {self.date} for {self.ticker}")


@dataclass(frozen=True)
class PriceSeries:
    ticker: str
    bars: tuple[Bar, ...]

    def __post_init__(self) -> None:
        dates = [b.date for b in self.bars]
        if any(a >= b for a, b in zip(dates, dates[1:])):
            raise DataError(f"dates for {self.ticker} are not strictly increasing")

    def __len__(self) -> int:
        return len(self.bars)

    @property
    def closes(self) -> np.ndarray:
        return np.array([b.close for b in self.bars])


@dataclass(frozen=True, eq=False)
class Universe:
    """Aligned T x D panels; column order follows ``tickers``."""

    tickers: tuple[str, ...]
    calendar: tuple[date, ...]
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray

    def __post_init__(self) -> None:
        t, d = len(self.calendar), len(self.tickers)
        if t < 1 or d < 1:
            raise DataError("universe needs at least one date and one ticker")
        if any(a >= b for a, b in zip(self.calendar, self.calendar[1:])):
            raise DataError("calendar must be strictly increasing")
        for name in FIELDS:
            panel = np.asarray(getattr(self, name), dtype=float)
            if panel.shape != (t, d):
                raise DataError(f"{name} panel has shape {panel.shape}, expected {(t, d)}")
            if not np.all(np.isfinite(panel)):
                raise DataError(f"{name} panel has missing values")
            panel.setflags(write=False)
            object.__setattr__(self, name, panel)

    @property
    def n_days(self) -> int:
        return len(self.calendar)

    @property
    def n_stocks(self) -> int:
        return len(self.tickers)

    def column(self, ticker: str) -> int:
        try:
            return self.tickers.index(ticker)
        except ValueError:
            raise KeyError(f"unknown ticker {ticker!r}") from None

    def slice_days(self, start: int, stop: int) -> Universe:
        return Universe(
            self.tickers,
            self.calendar[start:stop],
            *(getattr(self, f)[start:stop] for f in FIELDS),
        )

    def select(self, tickers: Sequence[str]) -> Universe:
        cols = [self.column(t) for t in tickers]
        return Universe(tuple(tickers), self.calendar, *(getattr(self, f)[:, cols] for f in FIELDS))

    def equals(self, other: Universe) -> bool:
        return (
            self.tickers == other.tickers
            and self.calendar == other.calendar
            and all(np.array_equal(getattr(self, f), getattr(other, f)) for f in FIELDS)
        )

    def to_bars(self) -> list[Bar]:
        bars = []
        for i, day in enumerate(self.calendar):
            for j, ticker in enumerate(self.tickers):
                bars.append(Bar(day, ticker, *(float(getattr(self, f)[i, j]) for f in FIELDS)))
        return bars


def _parse_row(row: list[str], line: int) -> Bar:
    if len(row) != len(CSV_COLUMNS):
        raise DataError(f"line {line}: expected {len(CSV_COLUMNS)} columns, got {len(row)}")
    try:
        day = date.fromisoformat(row[0].strip())
        values = [float(v) for v in row[2:]]
    except ValueError as exc:
        raise DataError(f"line {line}: {exc}") from None
    return Bar(day, row[1].strip(), *values)


def read_bars(text: str, source: str = "<csv>") -> list[Bar]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip().lower() for h in header] != list(CSV_COLUMNS):
        raise DataError(f"{source}: header must be {','.join(CSV_COLUMNS)}")
    bars = []
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        bar = _parse_row(row, line)
        bar.validate()
        bars.append(bar)
    return bars


def align(bars: Iterable[Bar]) -> Universe:
    """Inner-join bars on date: keep only days on which every ticker traded."""
    by_ticker: dict[str, dict[date, Bar]] = {}
    for bar in bars:
        per = by_ticker.setdefault(bar.ticker, {})
        if bar.date in per:
            raise DataError(f"duplicate bar for {bar.ticker} on {bar.date}")
        per[bar.date] = bar
    if not by_ticker:
        raise DataError("no bars to align")
    tickers = tuple(sorted(by_ticker))
    common = set.intersection(*(set(per) for per in by_ticker.values()))
    if not common:
        raise DataError("tickers share no common trading dates")
    calendar = tuple(sorted(common))
    panels = {
        f: np.array([[getattr(by_ticker[t][d], f) for t in tickers] for d in calendar])
        for f in FIELDS
    }
    return Universe(tickers, calendar, **panels)


def load_csv(path: str | os.PathLike) -> Universe:
    path = Path(path)
    return align(read_bars(path.read_text(encoding="utf-8"), source=str(path)))


def write_csv(path: str | os.PathLike, bars: Iterable[Bar]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for b in bars:
            writer.writerow([b.date.isoformat(), b.ticker, repr(b.open), repr(b.high),
                             repr(b.low), repr(b.close), repr(b.volume)])


def split_by_dates(u: Universe, train_end: date, val_end: date) -> tuple[Universe, Universe, Universe]:
    """Partition the calendar into (..train_end], (train_end..val_end], (val_end..]."""
    if not train_end < val_end:
        raise DataError("train_end must precede val_end")
    first, last = u.calendar[0], u.calendar[-1]
    if not (first <= train_end <= last and first <= val_end <= last):
        raise DataError(f"split boundaries must lie within {first}..{last}")
    days = np.array([d.toordinal() for d in u.calendar])
    i = int(np.searchsorted(days, train_end.toordinal(), side="right"))
    j = int(np.searchsorted(days, val_end.toordinal(), side="right"))
    if i == 0 or j == i or j == len(days):
        raise DataError("split produces an empty partition")
    return u.slice_days(0, i), u.slice_days(i, j), u.slice_days(j, len(days))


def turnover_proxy(u: Universe, window: int, baseline: int = 20) -> np.ndarray:
    """Mean of volume / trailing-``baseline``-day mean volume over the last ``window`` days."""
    if window < 1 or window > u.n_days:
        raise DataError(f"turnover window {window} outside 1..{u.n_days}")
    vol = pd.DataFrame(u.volume)
    trailing = vol.rolling(baseline, min_periods=1).mean()
    ratio = (vol / trailing.where(trailing > 0)).fillna(0.0)
    return ratio.iloc[-window:].mean().to_numpy()


def rank_by_turnover(u: Universe, window: int, k: int, proxy: np.ndarray | None = None) -> list[str]:
    """Return the ``k`` tickers with the lowest turnover proxy, ties broken by symbol."""
    if window > u.n_days:
        raise DataError(f"turnover window {window} exceeds {u.n_days} days")
    if not 1 <= k <= u.n_stocks:
        raise DataError(f"k={k} outside 1..{u.n_stocks}")
    if proxy is None:
        proxy = turnover_proxy(u, window)
    order = sorted(range(u.n_stocks), key=lambda j: (proxy[j], u.tickers[j]))
    return [u.tickers[j] for j in order[:k]]


def business_calendar(t: int, start: date = date(2000, 1, 3)) -> tuple[date, ...]:
    return tuple(d.date() for d in pd.bdate_range(start, periods=t))


def universe_from_closes(
    closes: np.ndarray,
    spread: np.ndarray | float = 0.01,
    tickers: Sequence[str] | None = None,
    calendar: Sequence[date] | None = None,
    volume: np.ndarray | float = 1e6,
) -> Universe:
    """Build bars around given close paths with high/low = close * (1 +/- spread)."""
    closes = np.asarray(closes, dtype=float)
    if closes.ndim == 1:
        closes = closes[:, None]
    t, d = closes.shape
    spread = np.broadcast_to(np.asarray(spread, dtype=float), (t, d))
    if np.any(spread < 0) or np.any(spread >= 1):
        raise DataError("spread must lie in [0, 1)")
    tickers = tuple(tickers) if tickers is not None else tuple(f"S{j:02d}" for j in range(d))
    calendar = tuple(calendar) if calendar is not None else business_calendar(t)
    return Universe(
        tickers,
        calendar,
        open=closes.copy(),
        high=closes * (1.0 + spread),
        low=closes * (1.0 - spread),
        close=closes,
        volume=np.broadcast_to(np.asarray(volume, dtype=float), (t, d)).copy(),
    )


def synthetic_universe(
    seed: int,
    d: int,
    t: int,
    drift: float,
    vol: float,
    p0: float = 100.0,
    max_spread: float = 0.02,
    start: date = date(2000, 1, 3),
) -> Universe:
    """Geometric Brownian closes with exact exponential steps; deterministic given ``seed``."""
    if d < 1 or t < 2 or vol < 0:
        raise DataError("need d >= 1, t >= 2, vol >= 0")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((t - 1, d))
    log_steps = (drift - 0.5 * vol**2) + vol * z
    log_path = np.vstack([np.zeros((1, d)), np.cumsum(log_steps, axis=0)])
    close = p0 * np.exp(log_path)
    u = np.abs(rng.uniform(-max_spread, max_spread, size=(t, d)))
    high = close * (1.0 + u)
    low = close * (1.0 - u)
    open_ = close * (1.0 + u * rng.uniform(-1.0, 1.0, size=(t, d)))
    open_ = np.clip(open_, low, high)
    volume = rng.uniform(5e5, 2e6, size=(t, d)).round()
    tickers = tuple(f"S{j:02d}" for j in range(d))
    return Universe(tickers, business_calendar(t, start), open_, high, low, close, volume)


def default_cache_dir() -> Path:
    return Path(os.environ.get("QUANT_CACHE_DIR", Path.home() / ".cache" / "quant"))


def _remote_url(endpoint: str, ticker: str, start: date, end: date) -> str:
    if "{ticker}" in endpoint:
        return endpoint.format(ticker=ticker, start=start.isoformat(), end=end.isoformat())
    query = urllib.parse.urlencode({"ticker": ticker, "start": start.isoformat(), "end": end.isoformat()})
    return f"{endpoint}{'&' if '?' in endpoint else '?'}{query}"


def _parse_remote(text: str, ticker: str) -> list[Bar]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise FetchError(f"{ticker}: empty payload")
    names = {n.strip().lower(): n for n in reader.fieldnames}
    missing = [c for c in ("date", "open", "high", "low", "close", "volume") if c not in names]
    if missing:
        raise FetchError(f"{ticker}: payload lacks columns {missing}")
    bars = []
    for line, row in enumerate(reader, start=2):
        try:
            bar = Bar(
                date.fromisoformat(row[names["date"]].strip()),
                ticker,
                *(float(row[names[c]]) for c in ("open", "high", "low", "close", "volume")),
            )
        except (TypeError, ValueError) as exc:
            raise FetchError(f"{ticker}: unparseable payload at line {line}: {exc}") from None
        bar.validate()
        bars.append(bar)
    return bars


def fetch_remote(
    ticker: str,
    start: date,
    end: date,
    endpoint: str,
    cache_dir: str | os.PathLike | None = None,
    timeout: float = 30.0,
) -> PriceSeries:
    """Download daily bars for one ticker, caching them as ``<cache>/<ticker>.csv``.

    A cached file short-circuits the request entirely. ``endpoint`` may contain
    ``{ticker}``, ``{start}`` and ``{end}`` placeholders; otherwise they are sent
    as query parameters. The payload must be CSV with date/open/high/low/close/volume
    columns (extra columns are ignored).
    """
    if end < start:
        raise FetchError("end precedes start")
    cache = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    cached = cache / f"{ticker}.csv"
    if cached.exists():
        bars = read_bars(cached.read_text(encoding="utf-8"), source=str(cached))
    else:
        url = _remote_url(endpoint, ticker, start, end)
        logger.info("fetching %s", url)
        try:
            with urllib.request.urlopen(url, timeout=timeout) as resp:
                text = resp.read().decode("utf-8")
        except urllib.error.HTTPError as exc:
            raise FetchError(f"{ticker}: HTTP {exc.code}", retryable=exc.code >= 500 or exc.code == 429) from None
        except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
            raise FetchError(f"{ticker}: {exc}", retryable=True) from None
        bars = sorted(_parse_remote(text, ticker), key=lambda b: b.date)
        if bars:
            write_csv(cached, bars)
    bars = [b for b in bars if start <= b.date <= end]
    if not bars:
        raise FetchError(f"{ticker}: no bars between {start} and {end}")
    return PriceSeries(ticker, tuple(bars))
