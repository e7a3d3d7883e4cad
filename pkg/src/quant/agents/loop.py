"""Model-based training loop (PETS / MBPO / M2AC and the RSRS-override variants)."""

from __future__ import annotations

import csv
import enum
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Protocol

import numpy as np

from ..backtest import EquityCurve
from ..dynamics import (
    MIN_TRAIN_TRANSITIONS,
    EnsembleModel,
    ReplayBuffer,
    Transitions,
    mask_rollouts,
    rollout,
    train_model,
)
from ..seeding import component_rng
from ..trading_env import TradingEnv
from .cem import CemPlanner, PetsController
from .sac import SacAgent, sac_update

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "step", "q_loss", "pi_loss", "entropy", "model_holdout_nll", "env_reward",
                   "executed_mean", "overrides", "err_balance", "err_holdings")


class Variant(str, enum.Enum):
    PETS = "PETS"
    MBPO = "MBPO"
    M2AC = "M2AC"
    RSPO = "RSPO"
    RSAC = "RSAC"

    @property
    def override(self) -> bool:
        return self in (Variant.RSPO, Variant.RSAC)

    @property
    def masked(self) -> bool:
        return self in (Variant.M2AC, Variant.RSAC)

    @property
    def planning(self) -> bool:
        return self is Variant.PETS


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    variant: Variant = Variant.MBPO
    epochs: int = 50
    steps_per_epoch: int = 0          # 0 -> one full episode per epoch
    rollouts_per_step: int = 256
    rollout_length: int = 3
    updates_per_step: int = 20
    batch_size: int = 256
    warmup_steps: int = 1000
    real_ratio: float = 0.0
    model_retain_epochs: int = 1      # imagined data kept for this many epochs of rollouts
    env_buffer_capacity: int = 1_000_000
    # dynamics model
    ensemble_size: int = 5
    elites: int = 3
    model_hidden: tuple[int, ...] = (200, 200)
    model_epochs: int = 20
    model_batch_size: int = 256
    model_lr: float = 1e-3
    holdout_fraction: float = 0.1
    keep_fraction: float = 0.5
    # SAC
    agent_hidden: tuple[int, ...] = (64, 64)
    gamma: float = 0.99
    tau: float = 0.005
    alpha: float = 0.2
    lr_q: float = 3e-4
    lr_pi: float = 3e-4
    # CEM
    cem_horizon: int = 5
    cem_population: int = 100
    cem_elites: int = 10
    cem_iterations: int = 5

    def __post_init__(self) -> None:
        self.variant = Variant(self.variant)
        self.model_hidden = tuple(self.model_hidden)
        self.agent_hidden = tuple(self.agent_hidden)
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        for name in ("steps_per_epoch", "rollouts_per_step", "updates_per_step", "warmup_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("rollout_length", "batch_size", "model_epochs", "model_batch_size", "model_retain_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not 0.0 <= self.real_ratio <= 1.0:
            raise ValueError("real_ratio must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["model_hidden"] = list(self.model_hidden)
        d["agent_hidden"] = list(self.agent_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train options: {sorted(unknown)}")
        return cls(**d)


class Actor(Protocol):
    def act(self, obs: np.ndarray, deterministic: bool = False,
            rng: np.random.Generator | None = None) -> np.ndarray: ...


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    sac_update_calls: int = 0

    def append(self, **row) -> None:
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def epoch_mean(self, name: str) -> dict[int, float]:
        """Per-epoch mean of a column, ignoring NaN entries."""
        out: dict[int, list[float]] = {}
        for r in self.rows:
            v = r[name]
            if v is not None and not math.isnan(v):
                out.setdefault(r["epoch"], []).append(v)
        return {e: float(np.mean(v)) for e, v in out.items()}

    def write_csv(self, path: str | os.PathLike) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.rows:
                w.writerow([_cell(r[c]) for c in HISTORY_COLUMNS])

    @classmethod
    def read_csv(cls, path: str | os.PathLike) -> History:
        hist = cls()
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                hist.rows.append({k: (int(v) if k in ("epoch", "step", "overrides") else
                                      (float(v) if v != "" else math.nan)) for k, v in row.items()})
        return hist


def _cell(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


@dataclass
class TrainResult:
    actor: Actor
    model: EnsembleModel
    history: History
    env_buffer: ReplayBuffer
    model_buffer: ReplayBuffer
    config: TrainConfig
    agent: SacAgent | None = None


class RandomActor:
    def __init__(self, action_dim: int) -> None:
        self.action_dim = action_dim

    def act(self, obs, deterministic=False, rng=None):
        return rng.uniform(-1.0, 1.0, size=self.action_dim)


class HoldActor:
    """Always requests zero trades."""

    def __init__(self, action_dim: int) -> None:
        self.action_dim = action_dim

    def act(self, obs, deterministic=False, rng=None):
        return np.zeros(self.action_dim)


def _model_errors(model: EnsembleModel, obs: np.ndarray, action: np.ndarray, next_obs: np.ndarray,
                  n_stocks: int) -> tuple[float, float]:
    """Absolute one-step errors on the balance and (mean) holdings coordinates."""
    if not model.trained:
        return math.nan, math.nan
    pred, _ = model.predict(obs[None], action[None], member="mean")
    err = np.abs(pred[0] - next_obs)
    return float(err[0]), float(err[1 + n_stocks:1 + 2 * n_stocks].mean())


def _env_step(env: TradingEnv, buffer: ReplayBuffer, obs: np.ndarray, action: np.ndarray,
              override: bool) -> tuple[np.ndarray, np.ndarray, float, np.ndarray, int, bool]:
    shares, fired = env.shares_for(action, override=override)
    applied = shares / env.config.hmax
    result = env.step(shares)
    next_obs = env.observe()
    buffer.add(obs, applied, result.reward, next_obs, result.done)
    return applied, next_obs, result.reward, result.executed, fired, result.done


def train(config: TrainConfig, env: TradingEnv, seed: int = 0) -> TrainResult:
    """Run the model-based loop on ``env`` and return the trained actor and history."""
    variant = config.variant
    env = env.with_config(override_enabled=variant.override)
    obs_dim, act_dim, d = env.obs_dim, env.action_dim, env.market.n_stocks
    env_rng = component_rng(seed, "env")
    model_rng = component_rng(seed, "model")
    sac_rng = component_rng(seed, "sac")
    rollout_rng = component_rng(seed, "rollout")

    model = EnsembleModel(obs_dim, act_dim, members=config.ensemble_size, elites=config.elites,
                          hidden=config.model_hidden, lr=config.model_lr, rng=component_rng(seed, "model-init"))
    agent = None
    if variant.planning:
        planner = CemPlanner(act_dim, config.cem_horizon, config.cem_population, config.cem_elites,
                             config.cem_iterations)
        actor: Actor = PetsController(planner, model, component_rng(seed, "cem"))
    else:
        agent = SacAgent(obs_dim, act_dim, config.agent_hidden, config.gamma, config.tau, config.alpha,
                         config.lr_q, config.lr_pi, rng=component_rng(seed, "agent-init"))
        actor = agent
    d_env = ReplayBuffer(config.env_buffer_capacity, obs_dim, act_dim)
    steps_per_epoch = config.steps_per_epoch or env.market.n_days - 1
    per_epoch = max(1, config.rollouts_per_step * config.rollout_length * steps_per_epoch)
    d_model = ReplayBuffer(per_epoch * config.model_retain_epochs, obs_dim, act_dim)
    history = History()

    random_actor = RandomActor(act_dim)
    obs = env.reset()
    for _ in range(config.warmup_steps):
        _, obs, _, _, _, done = _env_step(env, d_env, obs, random_actor.act(obs, rng=env_rng), variant.override)
        if done:
            obs = env.reset()

    obs = env.reset()
    policy_fn = (lambda o: agent.act(o, rng=rollout_rng)) if agent is not None else None
    global_step = 0
    for epoch in range(1, config.epochs + 1):
        holdout_nll = math.nan
        if len(d_env) >= MIN_TRAIN_TRANSITIONS:
            rep = train_model(model, d_env, config.model_epochs, config.model_batch_size,
                              config.holdout_fraction, model_rng)
            holdout_nll = rep.mean_holdout_nll
        elif variant.planning:
            logger.warning("epoch %d: too little data to train the model; acting randomly", epoch)

        for _ in range(steps_per_epoch):
            global_step += 1
            if variant.planning and not model.trained:
                action = random_actor.act(obs, rng=env_rng)
            else:
                action = actor.act(obs, deterministic=False, rng=env_rng)
            prev_obs = obs
            applied, obs, reward, executed, fired, done = _env_step(env, d_env, obs, action, variant.override)
            err_bal, err_hold = _model_errors(model, prev_obs, applied, obs, d)
            if done:
                obs = env.reset()

            losses = []
            if agent is not None and model.trained:
                if config.rollouts_per_step > 0:
                    starts = d_env.sample_obs(config.rollouts_per_step, rollout_rng)
                    imagined = rollout(model, policy_fn, starts, config.rollout_length, rollout_rng)
                    if variant.masked:
                        scores = model.uncertainty(imagined.obs, imagined.action)
                        imagined = mask_rollouts(imagined, scores, config.keep_fraction)
                    d_model.add_batch(imagined)
                for _ in range(config.updates_per_step):
                    if len(d_model) == 0:
                        break
                    batch = _training_batch(config, d_env, d_model, sac_rng)
                    try:
                        losses.append(sac_update(agent, batch, sac_rng))
                    except FloatingPointError as exc:
                        raise TrainingDiverged(f"epoch {epoch} step {global_step}: {exc}") from exc
                    history.sac_update_calls += 1
            history.append(
                epoch=epoch, step=global_step,
                q_loss=float(np.mean([l.q_loss for l in losses])) if losses else math.nan,
                pi_loss=float(np.mean([l.pi_loss for l in losses])) if losses else math.nan,
                entropy=float(np.mean([l.entropy for l in losses])) if losses else math.nan,
                model_holdout_nll=holdout_nll, env_reward=reward,
                executed_mean=float(np.mean(executed)), overrides=fired,
                err_balance=err_bal, err_holdings=err_hold,
            )
        logger.info("epoch %d done: %s", epoch, {k: round(v, 4) for k, v in
                                                  ((c, history.epoch_mean(c).get(epoch, math.nan))
                                                   for c in ("q_loss", "env_reward"))})
    return TrainResult(actor, model, history, d_env, d_model, config, agent)


def _training_batch(config: TrainConfig, d_env: ReplayBuffer, d_model: ReplayBuffer,
                    rng: np.random.Generator) -> Transitions:
    n_real = int(round(config.batch_size * config.real_ratio))
    if n_real == 0 or len(d_env) == 0:
        return d_model.sample(config.batch_size, rng)
    parts = [d_env.sample(n_real, rng)]
    if config.batch_size - n_real > 0:
        parts.append(d_model.sample(config.batch_size - n_real, rng))
    return Transitions.concat(parts)


def evaluate(actor: Actor, env: TradingEnv, variant: Variant | str = Variant.MBPO,
             seed: int = 0) -> EquityCurve:
    """Roll the deterministic policy (plus override for RSPO/RSAC) through one episode."""
    variant = Variant(variant)
    env = env.with_config(override_enabled=variant.override)
    rng = component_rng(seed, "evaluate")
    obs = env.reset()
    assets = [env.state.balance + env.state.prices @ env.state.holdings]
    rewards, costs, executed = [], [], []
    while not env.done:
        action = actor.act(obs, deterministic=True, rng=rng)
        shares, _ = env.shares_for(action)
        result = env.step(shares)
        obs = env.observe()
        assets.append(result.next_state.balance + result.next_state.prices @ result.next_state.holdings)
        rewards.append(result.reward)
        costs.append(result.cost)
        executed.append(result.executed)
    return EquityCurve(list(env.market.dates), np.array(assets), np.array(rewards), np.array(costs),
                       np.array(executed))


def config_replace(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, **changes)
