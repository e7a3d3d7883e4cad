"""Deterministic synthetic markets used by the self-test, examples and acceptance runs."""

from __future__ import annotations

import numpy as np

from .market_data import Universe, universe_from_closes
from .trading_env import EnvConfig, MarketSlice, TradingEnv, make_slice

TECH_WARMUP = 60


def drift_market(days: int = 200, daily_return: float = 0.01, p0: float = 100.0,
                 warmup: int = TECH_WARMUP, spread: float = 0.01) -> tuple[Universe, int]:
    """One stock compounding ``daily_return`` every day, preceded by ``warmup`` history days.

    Returns the universe and the index of the first tradeable day.
    """
    n = warmup + days
    closes = p0 * (1.0 + daily_return) ** np.arange(n)
    return universe_from_closes(closes, spread=spread, tickers=["DRIFT"]), warmup


def crash_market(up_days: int = 100, crash_days: int = 30, recovery_days: int = 70,
                 crash: float = -0.40, up_return: float = 0.003, p0: float = 1000.0,
                 warmup: int = 320, base_spread: float = 0.01, crash_spread: float = 0.04) -> tuple[Universe, int]:
    """Steady rise, a ``crash`` fall over ``crash_days``, then recovery to the pre-crash level.

    The intraday range is constant before the crash, widens through the fall (the
    high-on-low slope dips) and stays wide during the recovery (the slope sits
    above its pre-crash level).
    The ``warmup`` prefix (a slower rise) lets every indicator warm up.
    """
    pre = p0 * 1.001 ** np.arange(warmup)
    up = pre[-1] * (1.0 + up_return) ** np.arange(1, up_days + 1)
    down_step = (1.0 + crash) ** (1.0 / crash_days)
    down = up[-1] * down_step ** np.arange(1, crash_days + 1)
    rec_step = (up[-1] / down[-1]) ** (1.0 / recovery_days)
    rec = down[-1] * rec_step ** np.arange(1, recovery_days + 1)
    closes = np.concatenate([pre, up, down, rec])
    spread = np.concatenate([
        np.full(warmup + up_days, base_spread),
        np.linspace(base_spread, crash_spread, crash_days + 1)[1:],
        np.full(recovery_days, crash_spread),
    ])
    return universe_from_closes(closes, spread=spread[:, None], tickers=["CRASH"]), warmup


def market_env(universe: Universe, start: int, config: EnvConfig | None = None) -> TradingEnv:
    config = config or EnvConfig()
    market: MarketSlice = make_slice(universe, config, start)
    return TradingEnv(market, config)
