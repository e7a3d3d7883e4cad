from datetime import date
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pandas.tseries.holiday import (
    AbstractHolidayCalendar,
    GoodFriday,
    Holiday,
    USLaborDay,
    USMartinLutherKingJr,
    USMemorialDay,
    USPresidentsDay,
    USThanksgivingDay,
    nearest_workday,
)

from quant.market_data import (
    DataError,
    FetchError,
    align,
    fetch_remote,
    load_csv,
    rank_by_turnover,
    split_by_dates,
    synthetic_universe,
    universe_from_closes,
    write_csv,
)

HEADER = "date,ticker,open,high,low,close,volume\n"


def _rows(ticker, days, price=10.0):
    return "".join(f"2021-01-{d:02d},{ticker},{price},{price + 1},{price - 1},{price},1000\n" for d in days)


def _write(tmp_path, body, name="bars.csv"):
    path = tmp_path / name
    path.write_text(HEADER + body)
    return path


def test_identity_alignment(tmp_path):
    u = load_csv(_write(tmp_path, _rows("A", range(4, 9)) + _rows("B", range(4, 9))))
    assert (u.n_days, u.n_stocks) == (5, 2)
    assert u.tickers == ("A", "B")


def test_inner_join_alignment(tmp_path):
    u = load_csv(_write(tmp_path, _rows("A", range(4, 9)) + _rows("B", range(5, 10))))
    assert u.n_days == 4
    assert u.calendar[0] == date(2021, 1, 5) and u.calendar[-1] == date(2021, 1, 8)


def test_high_below_low_names_row(tmp_path):
    body = _rows("A", [4]) + "2021-01-05,A,10,8,9,10,100\n"
    with pytest.raises(DataError, match="2021-01-05"):
        load_csv(_write(tmp_path, body))


def test_malformed_row_names_line(tmp_path):
    body = _rows("A", [4]) + "2021-01-05,A,10,11\n"
    with pytest.raises(DataError, match="line 3"):
        load_csv(_write(tmp_path, body))


def test_unparseable_number_names_line(tmp_path):
    with pytest.raises(DataError, match="line 2"):
        load_csv(_write(tmp_path, "2021-01-04,A,x,11,9,10,100\n"))


def test_empty_intersection(tmp_path):
    with pytest.raises(DataError, match="common"):
        load_csv(_write(tmp_path, _rows("A", [4, 5]) + _rows("B", [6, 7])))


def test_alignment_idempotent(tmp_path):
    u = load_csv(_write(tmp_path, _rows("A", range(4, 9)) + _rows("B", range(5, 10))))
    assert align(u.to_bars()).equals(u)


def test_csv_roundtrip(tmp_path):
    u = synthetic_universe(3, d=2, t=20, drift=0.001, vol=0.02)
    write_csv(tmp_path / "u.csv", u.to_bars())
    assert load_csv(tmp_path / "u.csv").equals(u)


def test_split_sizes():
    u = synthetic_universe(0, d=1, t=10, drift=0.0, vol=0.01)
    tr, va, te = split_by_dates(u, u.calendar[4], u.calendar[7])
    assert (tr.n_days, va.n_days, te.n_days) == (5, 3, 2)
    assert tr.calendar + va.calendar + te.calendar == u.calendar


def test_split_rejects_bad_bounds():
    u = synthetic_universe(0, d=1, t=10, drift=0.0, vol=0.01)
    with pytest.raises(DataError):
        split_by_dates(u, u.calendar[7], u.calendar[4])
    with pytest.raises(DataError):
        split_by_dates(u, u.calendar[4], date(2099, 1, 1))


@given(st.integers(3, 60), st.data())
@settings(max_examples=40, deadline=None)
def test_split_partitions(t, data):
    u = synthetic_universe(1, d=1, t=t, drift=0.0, vol=0.01)
    i = data.draw(st.integers(0, t - 3))
    j = data.draw(st.integers(i + 1, t - 2))
    parts = split_by_dates(u, u.calendar[i], u.calendar[j])
    assert sum(p.n_days for p in parts) == t
    joined = sum((p.calendar for p in parts), ())
    assert joined == u.calendar and len(set(joined)) == t


class _NyseCalendar(AbstractHolidayCalendar):
    rules = [
        Holiday("NewYearsDay", month=1, day=1, observance=nearest_workday),
        USMartinLutherKingJr,
        USPresidentsDay,
        GoodFriday,
        USMemorialDay,
        Holiday("IndependenceDay", month=7, day=4, observance=nearest_workday),
        USLaborDay,
        USThanksgivingDay,
        Holiday("Christmas", month=12, day=25, observance=nearest_workday),
    ]


def test_nyse_calendar_split_counts():
    days = pd.bdate_range("2009-01-01", "2021-07-03", freq="C", holidays=_NyseCalendar().holidays("2008", "2022"))
    n = len(days)
    closes = np.full(n, 100.0)
    u = universe_from_closes(closes, calendar=[d.date() for d in days])
    tr, va, te = split_by_dates(u, date(2016, 7, 3), date(2018, 7, 3))
    assert abs(tr.n_days - 1888) <= 5
    assert abs(va.n_days - 504) <= 5
    assert abs(te.n_days - 755) <= 5


def test_rank_by_turnover_proxy_order():
    u = synthetic_universe(0, d=3, t=30, drift=0.0, vol=0.01)
    proxy = np.array([0.1, 0.5, 0.2])
    assert rank_by_turnover(u, 20, 2, proxy=proxy) == ["S00", "S02"]
    assert rank_by_turnover(u, 20, 3, proxy=proxy) == ["S00", "S02", "S01"]


def test_rank_by_turnover_ties_lexicographic():
    u = synthetic_universe(0, d=2, t=30, drift=0.0, vol=0.01)
    assert rank_by_turnover(u, 20, 1, proxy=np.array([0.1, 0.1])) == ["S00"]


def test_rank_by_turnover_computed_proxy_prefers_steady_volume():
    closes = np.full((60, 2), 50.0)
    volume = np.full((60, 2), 1e6)
    volume[-10:, 0] *= 5.0  # ticker S00 sees a volume surge
    u = universe_from_closes(closes, volume=volume)
    assert rank_by_turnover(u, 30, 1) == ["S01"]


def test_rank_by_turnover_window_too_long():
    u = synthetic_universe(0, d=2, t=10, drift=0.0, vol=0.01)
    with pytest.raises(DataError):
        rank_by_turnover(u, 11, 1)


def test_synthetic_degenerate_gbm():
    u = synthetic_universe(0, d=2, t=5, drift=0.0, vol=0.0, p0=42.0)
    assert np.all(u.close == 42.0)


def test_synthetic_deterministic():
    a = synthetic_universe(7, d=3, t=50, drift=0.001, vol=0.02)
    b = synthetic_universe(7, d=3, t=50, drift=0.001, vol=0.02)
    for f in ("open", "high", "low", "close", "volume"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()


def test_synthetic_zero_noise_closed_form():
    u = synthetic_universe(0, d=1, t=3, drift=0.01, vol=0.0, p0=100.0)
    expected = 100.0 * np.exp(0.01 * np.arange(3))
    np.testing.assert_allclose(u.close[:, 0], expected, rtol=1e-12)
    # simple-compounding approximation of the same path
    np.testing.assert_allclose(u.close[:, 0], 100.0 * 1.01 ** np.arange(3), rtol=1e-4)


def test_synthetic_bars_valid():
    u = synthetic_universe(5, d=4, t=100, drift=0.0005, vol=0.03)
    assert np.all(u.low <= np.minimum(u.open, u.close))
    assert np.all(u.high >= np.maximum(u.open, u.close))
    assert np.all(u.volume >= 0)


# --- remote fetch against a local fixture server (see conftest) ---------------------------

def test_fetch_fixture_and_cache(server, tmp_path):
    endpoint, handler = server
    series = fetch_remote("AAA", date(2020, 1, 1), date(2020, 1, 31), endpoint, cache_dir=tmp_path)
    assert len(series) == 3
    np.testing.assert_array_equal(series.closes, [10.5, 11.0, 10.2])
    assert (tmp_path / "AAA.csv").exists()
    assert handler.calls == 1
    again = fetch_remote("AAA", date(2020, 1, 1), date(2020, 1, 31), endpoint, cache_dir=tmp_path)
    assert handler.calls == 1
    np.testing.assert_array_equal(again.closes, series.closes)


def test_fetch_rejects_reversed_range(tmp_path):
    with pytest.raises(FetchError):
        fetch_remote("AAA", date(2020, 2, 1), date(2020, 1, 1), "http://127.0.0.1:9/{ticker}", cache_dir=tmp_path)


def test_fetch_http_failure_is_retryable(server, tmp_path):
    endpoint, _ = server
    with pytest.raises(FetchError) as info:
        fetch_remote("ZZZ", date(2020, 1, 1), date(2020, 1, 31), endpoint, cache_dir=tmp_path)
    assert info.value.retryable
    assert not (tmp_path / "ZZZ.csv").exists()


def test_fetch_unparseable_payload(server, tmp_path):
    endpoint, _ = server
    with pytest.raises(FetchError, match="unparseable"):
        fetch_remote("BAD", date(2020, 1, 1), date(2020, 1, 31), endpoint, cache_dir=tmp_path)


def test_fetch_empty_range(server, tmp_path):
    endpoint, _ = server
    with pytest.raises(FetchError, match="no bars"):
        fetch_remote("AAA", date(2021, 1, 1), date(2021, 1, 31), endpoint, cache_dir=tmp_path)


def test_cache_dir_from_environment(server, tmp_path, monkeypatch):
    endpoint, _ = server
    monkeypatch.setenv("QUANT_CACHE_DIR", str(tmp_path / "envcache"))
    fetch_remote("BBB", date(2020, 1, 1), date(2020, 1, 31), endpoint)
    assert Path(tmp_path / "envcache" / "BBB.csv").exists()
