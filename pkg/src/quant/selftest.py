"""Embedded oracle suite run by ``quant selftest``.

Each check recomputes a quantity by an independent, deliberately naive route
and compares it with the library under a fixed tolerance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .agents.sac import SacAgent, policy_loss_grads, q_loss_grads
from .backtest import annualized_return, calmar, max_drawdown, stability
from .dynamics import Transitions
from .indicators import ols_fit, rolling_ols, rsrs_scores
from .nn import Mlp, gaussian_nll
from .trading_env import EnvConfig, EnvState, asset_value, clip_action, settle_balance


@dataclass
class CheckResult:
    name: str
    tolerance: float
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tolerance)


def _ols_closed_form() -> float:
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(50):
        x = rng.normal(size=30)
        y = 0.7 * x + rng.normal(scale=0.3, size=30)
        n = len(x)
        sx, sy, sxx, sxy = x.sum(), y.sum(), (x * x).sum(), (x * y).sum()
        beta = (n * sxy - sx * sy) / (n * sxx - sx * sx)
        alpha = (sy - beta * sx) / n
        resid = y - alpha - beta * x
        r2 = 1.0 - (resid @ resid) / ((y - y.mean()) @ (y - y.mean()))
        fit = ols_fit(y, x)
        worst = max(worst, abs(fit.beta - beta), abs(fit.r2 - r2))
    return worst


def _rsrs_two_pass() -> float:
    rng = np.random.default_rng(12)
    t, l, m = 420, 10, 300
    low = 100.0 + np.cumsum(rng.normal(size=t))
    high = low * (1.0 + rng.uniform(0.005, 0.03, size=t))
    beta, r2 = rolling_ols(high, low, l)
    series = rsrs_scores(beta, r2, m)
    worst = 0.0
    for i in range(l + m - 2, t):
        window = [ols_fit(high[j - l + 1:j + 1], low[j - l + 1:j + 1]).beta for j in range(i - m + 1, i + 1)]
        mu = sum(window) / m
        sd = (sum((b - mu) ** 2 for b in window) / m) ** 0.5
        z = (window[-1] - mu) / sd
        rd = z * r2[i] * window[-1]
        worst = max(worst, abs(series.std[i] - z), abs(series.rightdev[i] - rd))
    return worst


def _drawdown_brute_force() -> float:
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(200):
        a = 100.0 * np.exp(np.cumsum(rng.normal(scale=0.02, size=int(rng.integers(2, 80)))))
        brute = min(min(a[j] / a[i] - 1.0 for j in range(i, len(a))) for i in range(len(a)))
        worst = max(worst, abs(max_drawdown(a) - brute))
    worst = max(worst, abs(max_drawdown([100, 120, 90, 130]) + 0.25))
    return worst


def _metric_identities() -> float:
    rng = np.random.default_rng(14)
    a = 100.0 * np.exp(np.cumsum(rng.normal(0.0005, 0.01, size=500)))
    err = abs(calmar(a) * abs(max_drawdown(a)) - annualized_return(a))
    err = max(err, abs(stability(100.0 * np.exp(0.001 * np.arange(300))) - 1.0))
    return err


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def _fd(fn: Callable[[], float], net: Mlp, h: float = 1e-6) -> np.ndarray:
    theta = net.flat()
    out = np.empty_like(theta)
    for i in range(len(theta)):
        bumped = theta.copy()
        bumped[i] += h
        net.set_flat(bumped)
        up = fn()
        bumped[i] -= 2 * h
        net.set_flat(bumped)
        out[i] = (up - fn()) / (2 * h)
    net.set_flat(theta)
    return out


def _grad_gaussian_nll() -> float:
    rng = np.random.default_rng(15)
    mean, log_std, target = rng.normal(size=(3, 6, 4))
    _, d_mean, d_log_std = gaussian_nll(mean, log_std, target)
    h = 1e-6
    fd_mean, fd_ls = np.empty_like(mean), np.empty_like(log_std)
    for idx in np.ndindex(mean.shape):
        for arr, out in ((mean, fd_mean), (log_std, fd_ls)):
            orig = arr[idx]
            arr[idx] = orig + h
            up = gaussian_nll(mean, log_std, target)[0]
            arr[idx] = orig - h
            down = gaussian_nll(mean, log_std, target)[0]
            arr[idx] = orig
            out[idx] = (up - down) / (2 * h)
    return max(_rel_err(d_mean, fd_mean), _rel_err(d_log_std, fd_ls))


def _small_agent(seed: int) -> tuple[SacAgent, Transitions, np.random.Generator]:
    rng = np.random.default_rng(seed)
    agent = SacAgent(3, 2, hidden=(32, 32), rng=rng)
    n = 16
    batch = Transitions(rng.normal(size=(n, 3)), rng.uniform(-1, 1, size=(n, 2)),
                        rng.normal(size=(n, 3)), rng.normal(size=n), np.zeros(n))
    return agent, batch, rng


def _grad_q_loss() -> float:
    agent, batch, rng = _small_agent(16)
    y = rng.normal(size=len(batch))
    _, grads = q_loss_grads(agent.q1, batch.obs, batch.action, y)
    analytic = np.concatenate([g.ravel() for g in grads])
    x = np.concatenate([batch.obs, batch.action], axis=1)
    numeric = _fd(lambda: float(np.mean((agent.q1.forward(x)[:, 0] - y) ** 2)), agent.q1)
    return _rel_err(analytic, numeric)


def _grad_policy() -> float:
    agent, batch, rng = _small_agent(17)
    noise = rng.normal(size=(len(batch), 2))
    _, grads, _ = policy_loss_grads(agent, batch.obs, noise)
    analytic = np.concatenate([g.ravel() for g in grads])
    numeric = _fd(lambda: policy_loss_grads(agent, batch.obs, noise)[0], agent.policy)
    return _rel_err(analytic, numeric)


def _accounting_replay() -> float:
    rng = np.random.default_rng(18)
    config = EnvConfig()
    d = 3
    prices = rng.uniform(10, 200, size=d)
    state = EnvState(config.initial_balance, prices, np.zeros(d, dtype=np.int64), np.zeros((d, 8)), 0)
    worst = 0.0
    for _ in range(2000):
        executed = clip_action(state, rng.integers(-config.hmax, config.hmax + 1, size=d), config)
        balance, cost = settle_balance(state.balance, state.prices, executed, config.cost_percentage)
        holdings = state.holdings + executed
        new_prices = state.prices * np.exp(rng.normal(scale=0.02, size=d))
        before = asset_value(state)
        state = EnvState(balance, new_prices, holdings, state.indicators, state.day_index + 1)
        expected = before - cost + (new_prices - prices) @ holdings
        if balance < 0 or np.any(holdings < 0):
            return float("inf")
        worst = max(worst, abs(asset_value(state) - expected) / abs(expected))
        prices = new_prices
    return worst


CHECKS: tuple[tuple[str, float, Callable[[], float]], ...] = (
    ("ols_closed_form", 1e-9, _ols_closed_form),
    ("rsrs_two_pass_moments", 1e-9, _rsrs_two_pass),
    ("max_drawdown_brute_force", 1e-12, _drawdown_brute_force),
    ("calmar_and_stability_identities", 1e-10, _metric_identities),
    ("gaussian_nll_gradient", 1e-4, _grad_gaussian_nll),
    ("q_loss_gradient", 1e-4, _grad_q_loss),
    ("policy_objective_gradient", 1e-4, _grad_policy),
    ("accounting_replay", 1e-9, _accounting_replay),
)


def run_checks() -> list[CheckResult]:
    results = []
    for name, tol, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            err = float(fn())
        except Exception:  # a crash inside an oracle is a failure, not an abort
            err = float("inf")
        results.append(CheckResult(name, tol, err, time.perf_counter() - t0))
    return results


def render(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  tolerance  max error   time     result"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {r.tolerance:<9.0e}  {r.error:<10.3e}  {r.seconds:6.2f}s  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
