"""Multi-stock trading MDP with integer share actions, proportional costs and
the RSRS action override."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import indicators as ind
from .market_data import Universe

N_INDICATORS = 8  # macd, sma30, sma60, boll width, rsi, cci, adx, rightdev


class EpisodeDone(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    initial_balance: float = 1e6
    hmax: int = 100
    cost_percentage: float = 0.001
    rs_buy: float = 1.0
    rs_sell: float = -0.4
    override_enabled: bool = False
    rsrs_window: int = 10
    rsrs_std_window: int = 300
    reward_scale: float = 100.0
    # subtract the cost a second time in the reward numerator
    double_count_cost: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.cost_percentage < 1.0:
            raise ValueError("cost_percentage must lie in [0, 1)")
        if self.hmax < 1:
            raise ValueError("hmax must be at least 1")
        if not self.rs_sell < self.rs_buy:
            raise ValueError("rs_sell must be below rs_buy")
        if self.initial_balance <= 0:
            raise ValueError("initial_balance must be positive")


@dataclass(frozen=True, eq=False)
class EnvState:
    balance: float
    prices: np.ndarray
    holdings: np.ndarray
    indicators: np.ndarray  # D x N_INDICATORS, raw units
    day_index: int

    @property
    def n_stocks(self) -> int:
        return len(self.prices)


@dataclass(frozen=True, eq=False)
class StepResult:
    next_state: EnvState
    reward: float
    done: bool
    executed: np.ndarray
    cost: float


def asset_value(state: EnvState) -> float:
    return float(state.balance + state.prices @ state.holdings)


def transaction_cost(prices: np.ndarray, executed: np.ndarray, cost_percentage: float) -> float:
    return float(np.asarray(prices, float) @ np.abs(np.asarray(executed, float)) * cost_percentage)


def settle_balance(balance: float, prices: np.ndarray, executed: np.ndarray, cost_percentage: float) -> tuple[float, float]:
    """Cash after trading ``executed`` at ``prices``; returns (balance, cost)."""
    cost = transaction_cost(prices, executed, cost_percentage)
    return float(balance - prices @ executed - cost), cost


def to_shares(action: np.ndarray, hmax: int) -> np.ndarray:
    """Scale a normalized action in [-1, 1] to integer shares, rounding toward zero."""
    return np.trunc(np.clip(np.asarray(action, float), -1.0, 1.0) * hmax).astype(np.int64)


def clip_action(state: EnvState, action: np.ndarray, config: EnvConfig) -> np.ndarray:
    """Make a share order feasible without ever reversing its direction.

    Sells are capped by holdings and settle first; buys are then filled greedily
    in ticker order while cash (including costs) lasts.
    """
    req = np.clip(np.asarray(action).astype(np.int64), -config.hmax, config.hmax)
    executed = np.zeros_like(req)
    sells = req < 0
    executed[sells] = -np.minimum(-req[sells], state.holdings[sells])
    pct = config.cost_percentage
    cash = state.balance - float(state.prices[sells] @ executed[sells]) * (1.0 - pct)
    for i in np.flatnonzero(req > 0):
        unit = state.prices[i] * (1.0 + pct)
        n = min(int(req[i]), int(math.floor(max(cash, 0.0) / unit)))
        executed[i] = n
        cash -= n * unit
    # float summation order can differ from the settlement formula
    while True:
        balance, _ = settle_balance(state.balance, state.prices, executed, pct)
        if balance >= 0 or not np.any(executed > 0):
            break
        last = np.flatnonzero(executed > 0)[-1]
        executed[last] -= 1
    return executed


def apply_rsrs_override(action: np.ndarray, rightdev: np.ndarray, config: EnvConfig) -> np.ndarray:
    """Force +hmax / -hmax per stock when the timing score crosses a threshold."""
    out = np.array(action, copy=True)
    rd = np.asarray(rightdev, dtype=float)
    with np.errstate(invalid="ignore"):
        out[rd > config.rs_buy] = config.hmax
        out[rd < config.rs_sell] = -config.hmax
    return out


def encode_observation(state: EnvState, config: EnvConfig, base_prices: np.ndarray) -> np.ndarray:
    """Normalized vector ``[balance, prices, holdings, indicators]`` of length 1 + 10 D."""
    ind_block = normalize_indicators(state.indicators, base_prices)
    return np.concatenate([
        [state.balance / config.initial_balance],
        state.prices / base_prices,
        state.holdings / config.hmax,
        ind_block.ravel(),
    ])


def normalize_indicators(block: np.ndarray, base_prices: np.ndarray) -> np.ndarray:
    out = np.array(block, dtype=float, copy=True)
    p0 = np.asarray(base_prices, float)[:, None]
    out[:, 0:4] /= p0       # macd, sma30, sma60, boll width
    out[:, 4:7] /= 100.0    # rsi, cci, adx
    return out


def decode_observation(obs: np.ndarray, config: EnvConfig, base_prices: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Recover (balance, prices, holdings) from an encoded observation."""
    d = len(base_prices)
    balance = obs[0] * config.initial_balance
    prices = obs[1:1 + d] * base_prices
    holdings = obs[1 + d:1 + 2 * d] * config.hmax
    return float(balance), prices, holdings


def observation_size(n_stocks: int) -> int:
    return 1 + 2 * n_stocks + N_INDICATORS * n_stocks


def cumulative_reward(rewards) -> float:
    return math.fsum(rewards)


def indicator_panel(u: Universe, config: EnvConfig) -> tuple[np.ndarray, np.ndarray]:
    """T x D x 8 indicator tensor with warm-up gaps filled, and the raw T x D rightdev."""
    blocks, raw = [], []
    for t in u.tickers:
        tech = ind.technical_block(u, t)
        boll_width = tech[:, 3] - tech[:, 4]
        rd = ind.rsrs_series(u, t, config.rsrs_window, config.rsrs_std_window).rightdev
        cols = np.column_stack([tech[:, 0], tech[:, 1], tech[:, 2], boll_width,
                                tech[:, 5], tech[:, 6], tech[:, 7], rd])
        blocks.append(ind.fill_warmup(cols))
        raw.append(rd)
    return np.stack(blocks, axis=1), np.column_stack(raw)


@dataclass(frozen=True, eq=False)
class MarketSlice:
    """Prices, filled indicators and raw RSRS scores for the tradeable days."""

    dates: tuple
    close: np.ndarray          # T x D
    indicators: np.ndarray     # T x D x 8
    rightdev: np.ndarray       # T x D, NaN where undefined

    @property
    def n_days(self) -> int:
        return len(self.dates)

    @property
    def n_stocks(self) -> int:
        return self.close.shape[1]


def make_slice(u: Universe, config: EnvConfig, start: int = 0, stop: int | None = None) -> MarketSlice:
    """Compute indicators on the full history ``u`` and keep days ``start:stop``.

    Passing the history preceding the trading window lets indicators warm up
    before the first tradeable day.
    """
    stop = u.n_days if stop is None else stop
    panel, rd = indicator_panel(u, config)
    return MarketSlice(u.calendar[start:stop], np.array(u.close[start:stop]), panel[start:stop], rd[start:stop])


def reset(market: MarketSlice, config: EnvConfig) -> EnvState:
    if market.n_days < 2:
        raise ValueError("an episode needs at least two days")
    d = market.n_stocks
    return EnvState(
        balance=float(config.initial_balance),
        prices=market.close[0].copy(),
        holdings=np.zeros(d, dtype=np.int64),
        indicators=market.indicators[0].copy(),
        day_index=0,
    )


def step(market: MarketSlice, state: EnvState, action: np.ndarray, config: EnvConfig) -> StepResult:
    """Trade ``action`` shares at today's close and advance one day."""
    if state.day_index + 1 >= market.n_days:
        raise EpisodeDone("episode already finished")
    executed = clip_action(state, action, config)
    balance, cost = settle_balance(state.balance, state.prices, executed, config.cost_percentage)
    t = state.day_index + 1
    nxt = EnvState(
        balance=balance,
        prices=market.close[t].copy(),
        holdings=state.holdings + executed,
        indicators=market.indicators[t].copy(),
        day_index=t,
    )
    before = asset_value(state)
    after = asset_value(nxt)
    gain = after - before - (cost if config.double_count_cost else 0.0)
    reward = gain / before * config.reward_scale
    return StepResult(nxt, float(reward), t == market.n_days - 1, executed, cost)


@dataclass
class TradingEnv:
    """Stateful wrapper around :func:`reset` / :func:`step` with observation encoding."""

    market: MarketSlice
    config: EnvConfig = field(default_factory=EnvConfig)
    state: EnvState | None = None
    done: bool = True

    @property
    def base_prices(self) -> np.ndarray:
        return self.market.close[0]

    @property
    def obs_dim(self) -> int:
        return observation_size(self.market.n_stocks)

    @property
    def action_dim(self) -> int:
        return self.market.n_stocks

    def reset(self) -> np.ndarray:
        self.state = reset(self.market, self.config)
        self.done = False
        return self.observe()

    def observe(self) -> np.ndarray:
        return encode_observation(self.state, self.config, self.base_prices)

    def rightdev(self) -> np.ndarray:
        return self.market.rightdev[self.state.day_index]

    def shares_for(self, action: np.ndarray, override: bool | None = None) -> tuple[np.ndarray, int]:
        """Integer order for a normalized action, plus the number of stocks whose signal fired."""
        shares = to_shares(action, self.config.hmax)
        use = self.config.override_enabled if override is None else override
        if not use:
            return shares, 0
        rd = self.rightdev()
        with np.errstate(invalid="ignore"):
            fired = int(np.count_nonzero((rd > self.config.rs_buy) | (rd < self.config.rs_sell)))
        return apply_rsrs_override(shares, rd, self.config), fired

    def step(self, shares: np.ndarray) -> StepResult:
        if self.done or self.state is None:
            raise EpisodeDone("call reset() before stepping")
        result = step(self.market, self.state, shares, self.config)
        self.state = result.next_state
        self.done = result.done
        return result

    def with_config(self, **changes) -> TradingEnv:
        return TradingEnv(self.market, replace(self.config, **changes))
