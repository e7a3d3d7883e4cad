"""Probabilistic ensemble transition model, replay buffers and model rollouts."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .nn import Adam, Mlp, clamp_log_std, gaussian_nll, load_mlps, save_mlps

logger = logging.getLogger(__name__)

MIN_TRAIN_TRANSITIONS = 8
STD_FLOOR = 1e-6
MODEL_LOG_STD_MIN = -10.0
MODEL_LOG_STD_MAX = 2.0
BUNDLE_VERSION = 1


class UntrainedModel(RuntimeError):
    pass


@dataclass
class Transitions:
    """Column-stacked batch of transitions."""

    obs: np.ndarray
    action: np.ndarray
    next_obs: np.ndarray
    reward: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return len(self.reward)

    def take(self, idx: np.ndarray) -> Transitions:
        return Transitions(self.obs[idx], self.action[idx], self.next_obs[idx], self.reward[idx], self.done[idx])

    @staticmethod
    def concat(parts: Sequence[Transitions]) -> Transitions:
        return Transitions(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                             ("obs", "action", "next_obs", "reward", "done")))


class ReplayBuffer:
    """Bounded FIFO of transitions backed by preallocated arrays."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int) -> None:
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.action = np.zeros((capacity, action_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.reward = np.zeros(capacity)
        self.done = np.zeros(capacity)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, obs, action, reward, next_obs, done) -> None:
        i = self._next
        self.obs[i] = obs
        self.action[i] = action
        self.reward[i] = reward
        self.next_obs[i] = next_obs
        self.done[i] = float(done)
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def add_batch(self, batch: Transitions) -> None:
        n = len(batch)
        if n == 0:
            return
        if n >= self.capacity:
            batch = batch.take(np.arange(n - self.capacity, n))
            n = self.capacity
        idx = (self._next + np.arange(n)) % self.capacity
        self.obs[idx] = batch.obs
        self.action[idx] = batch.action
        self.reward[idx] = batch.reward
        self.next_obs[idx] = batch.next_obs
        self.done[idx] = batch.done
        self._next = int((self._next + n) % self.capacity)
        self._size = min(self._size + n, self.capacity)

    def _order(self) -> np.ndarray:
        """Storage indices from oldest to newest."""
        if self._size < self.capacity:
            return np.arange(self._size)
        return (self._next + np.arange(self.capacity)) % self.capacity

    def all(self) -> Transitions:
        return self._gather(self._order())

    def _gather(self, idx: np.ndarray) -> Transitions:
        return Transitions(self.obs[idx], self.action[idx], self.next_obs[idx], self.reward[idx], self.done[idx])

    def sample(self, batch_size: int, rng: np.random.Generator) -> Transitions:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        n = min(batch_size, self._size)
        return self._gather(rng.choice(self._size, size=n, replace=False))

    def sample_obs(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self.obs[rng.integers(0, self._size, size=n)]


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> Normalizer:
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR))

    @classmethod
    def identity(cls, dim: int) -> Normalizer:
        return cls(np.zeros(dim), np.ones(dim))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean


@dataclass
class TrainingReport:
    train_nll: list[float]
    holdout_nll: list[float]
    holdout_mse: float
    elites: list[int]
    epoch_holdout_nll: list[float] = field(default_factory=list)

    @property
    def mean_holdout_nll(self) -> float:
        return float(np.mean([self.holdout_nll[i] for i in self.elites]))


class EnsembleModel:
    """B Gaussian MLPs predicting (next_obs - obs, reward) from (obs, action)."""

    def __init__(self, obs_dim: int, action_dim: int, members: int = 5, elites: int = 3,
                 hidden: Sequence[int] = (200, 200), lr: float = 1e-3,
                 rng: np.random.Generator | None = None) -> None:
        if members < 2:
            raise ValueError("an ensemble needs at least two members")
        if not 1 <= elites <= members:
            raise ValueError("elite count must lie in 1..members")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.out_dim = obs_dim + 1
        self.n_elites = elites
        self.nets = [Mlp((obs_dim + action_dim, *hidden, 2 * self.out_dim), rng) for _ in range(members)]
        self.optims = [Adam(net.params, lr=lr, names=net.names) for net in self.nets]
        self.in_norm = Normalizer.identity(obs_dim + action_dim)
        self.out_norm = Normalizer.identity(self.out_dim)
        self.elites = list(range(elites))
        self.trained = False

    @property
    def n_members(self) -> int:
        return len(self.nets)

    def _heads(self, member: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self.nets[member].forward(x)
        mean, raw = out[..., :self.out_dim], out[..., self.out_dim:]
        return mean, np.clip(raw, MODEL_LOG_STD_MIN, MODEL_LOG_STD_MAX)

    def _inputs(self, obs: np.ndarray, action: np.ndarray) -> np.ndarray:
        return self.in_norm.normalize(np.concatenate([obs, action], axis=-1))

    def member_outputs(self, obs: np.ndarray, action: np.ndarray, members: Sequence[int] | None = None):
        """Normalized (mean, log_std) per member, stacked on axis 0."""
        members = self.elites if members is None else members
        x = self._inputs(np.atleast_2d(obs), np.atleast_2d(action))
        heads = [self._heads(m, x) for m in members]
        return np.stack([h[0] for h in heads]), np.stack([h[1] for h in heads])

    def _check_ready(self) -> None:
        if not self.trained:
            raise UntrainedModel("dynamics model has not been trained")

    def predict(self, obs: np.ndarray, action: np.ndarray, member: int | str = "random-elite",
                rng: np.random.Generator | None = None, deterministic: bool = False,
                noise: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Sample (next_obs, reward) for a batch of (obs, action) rows.

        ``member`` is a member index, ``"random-elite"`` (independent elite per
        row) or ``"mean"`` (average of elite means, deterministic only).
        """
        self._check_ready()
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        action = np.atleast_2d(np.asarray(action, dtype=float))
        n = len(obs)
        x = self._inputs(obs, action)
        if member == "mean":
            means = np.stack([self._heads(m, x)[0] for m in self.elites])
            mean, log_std = means.mean(axis=0), np.full((n, self.out_dim), -np.inf)
        elif member == "random-elite":
            if rng is None:
                raise ValueError("random-elite selection needs an rng")
            choice = rng.integers(0, len(self.elites), size=n)
            mean = np.empty((n, self.out_dim))
            log_std = np.empty((n, self.out_dim))
            for k, m in enumerate(self.elites):
                rows = choice == k
                if rows.any():
                    mean[rows], log_std[rows] = self._heads(m, x[rows])
        else:
            if not isinstance(member, (int, np.integer)) or not 0 <= member < self.n_members:
                raise IndexError(f"member {member!r} out of range 0..{self.n_members - 1}")
            mean, log_std = self._heads(int(member), x)
        if deterministic or member == "mean":
            z = mean
        else:
            if noise is None:
                if rng is None:
                    raise ValueError("stochastic prediction needs an rng or explicit noise")
                noise = rng.standard_normal(mean.shape)
            z = mean + np.exp(log_std) * noise
        out = self.out_norm.denormalize(z)
        return obs + out[:, :-1], out[:, -1]

    def uncertainty(self, obs: np.ndarray, action: np.ndarray) -> np.ndarray:
        """Per-row score: mean pairwise L2 distance of elite means plus mean elite sigma norm.

        Computed in normalized output units so coordinates are comparable.
        """
        self._check_ready()
        if len(self.elites) < 2:
            raise ValueError("uncertainty needs at least two elites")
        means, log_stds = self.member_outputs(obs, action)
        b = len(self.elites)
        total = np.zeros(means.shape[1])
        for i in range(b):
            for j in range(i + 1, b):
                total += np.linalg.norm(means[i] - means[j], axis=-1)
        disagreement = total / (b * (b - 1) / 2)
        sigma = np.linalg.norm(np.exp(log_stds), axis=-1).mean(axis=0)
        return disagreement + sigma

    def to_bytes(self) -> bytes:
        nets = {f"member{i}": net for i, net in enumerate(self.nets)}
        extra = {
            "bundle_version": np.array(BUNDLE_VERSION),
            "dims": np.array([self.obs_dim, self.action_dim, self.n_elites]),
            "in_mean": self.in_norm.mean, "in_std": self.in_norm.std,
            "out_mean": self.out_norm.mean, "out_std": self.out_norm.std,
            "elites": np.array(self.elites), "trained": np.array(self.trained),
        }
        return save_mlps(nets, extra)

    @classmethod
    def from_bytes(cls, blob: bytes) -> EnsembleModel:
        nets, extra = load_mlps(blob)
        if int(extra["bundle_version"]) != BUNDLE_VERSION:
            raise ValueError("unsupported model bundle version")
        obs_dim, action_dim, n_elites = (int(v) for v in extra["dims"])
        members = [nets[f"member{i}"] for i in range(len(nets))]
        model = cls(obs_dim, action_dim, members=len(members), elites=n_elites, hidden=members[0].sizes[1:-1])
        model.nets = members
        model.optims = [Adam(net.params, names=net.names) for net in members]
        model.in_norm = Normalizer(extra["in_mean"], extra["in_std"])
        model.out_norm = Normalizer(extra["out_mean"], extra["out_std"])
        model.elites = [int(e) for e in extra["elites"]]
        model.trained = bool(extra["trained"])
        return model


def _member_nll(model: EnsembleModel, member: int, x: np.ndarray, y: np.ndarray) -> float:
    mean, log_std = model._heads(member, x)
    return gaussian_nll(mean, log_std, y)[0]


def train_model(model: EnsembleModel, data: ReplayBuffer | Transitions, epochs: int = 20,
                batch_size: int = 256, holdout_fraction: float = 0.1,
                rng: np.random.Generator | None = None) -> TrainingReport:
    """Fit every member by Gaussian NLL on its own bootstrap of the data.

    Elites are the members with the lowest holdout NLL after training.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    batch = data.all() if isinstance(data, ReplayBuffer) else data
    n = len(batch)
    if n < MIN_TRAIN_TRANSITIONS:
        raise ValueError(f"need at least {MIN_TRAIN_TRANSITIONS} transitions to train, got {n}")
    inputs = np.concatenate([batch.obs, batch.action], axis=1)
    targets = np.concatenate([batch.next_obs - batch.obs, batch.reward[:, None]], axis=1)
    model.in_norm = Normalizer.fit(inputs)
    model.out_norm = Normalizer.fit(targets)
    x_all = model.in_norm.normalize(inputs)
    y_all = model.out_norm.normalize(targets)

    perm = rng.permutation(n)
    n_hold = min(max(1, int(round(holdout_fraction * n))), n - 1)
    hold, train = perm[:n_hold], perm[n_hold:]
    x_hold, y_hold = x_all[hold], y_all[hold]
    boots = [train[rng.integers(0, len(train), size=len(train))] for _ in model.nets]

    epoch_holdout = []
    for _ in range(epochs):
        for m, net in enumerate(model.nets):
            idx = boots[m][rng.permutation(len(boots[m]))]
            for start in range(0, len(idx), batch_size):
                rows = idx[start:start + batch_size]
                out, tape = net.forward_record(x_all[rows])
                mean, raw = out[:, :model.out_dim], out[:, model.out_dim:]
                log_std, mask = clamp_log_std(raw, MODEL_LOG_STD_MIN, MODEL_LOG_STD_MAX)
                _, d_mean, d_log_std = gaussian_nll(mean, log_std, y_all[rows])
                grads, _ = net.backward(tape, np.concatenate([d_mean, d_log_std * mask], axis=1))
                model.optims[m].step(grads)
        epoch_holdout.append(float(np.mean([_member_nll(model, m, x_hold, y_hold) for m in range(model.n_members)])))

    train_nll = [_member_nll(model, m, x_all[boots[m]], y_all[boots[m]]) for m in range(model.n_members)]
    holdout_nll = [_member_nll(model, m, x_hold, y_hold) for m in range(model.n_members)]
    model.elites = sorted(int(i) for i in np.argsort(holdout_nll, kind="stable")[:model.n_elites])
    model.trained = True
    pred_next, pred_rew = model.predict(batch.obs[hold], batch.action[hold], member="mean")
    err = np.concatenate([pred_next - batch.next_obs[hold], (pred_rew - batch.reward[hold])[:, None]], axis=1)
    report = TrainingReport(train_nll, holdout_nll, float(np.mean(err**2)), list(model.elites), epoch_holdout)
    logger.debug("model trained: holdout nll %s, mse %.3g", holdout_nll, report.holdout_mse)
    return report


Policy = Callable[[np.ndarray], np.ndarray]


def rollout(model: EnsembleModel, policy: Policy, start_obs: np.ndarray, k: int,
            rng: np.random.Generator | None = None, member: int | str = "random-elite",
            deterministic: bool = False) -> Transitions:
    """Branch ``k``-step imagined trajectories from each start observation.

    Rows are ordered step-major: step 0 for every start, then step 1, and so on.
    Each step draws a fresh random elite per trajectory unless ``member`` is fixed.
    The model has no termination head, so every trajectory runs the full ``k`` steps.
    """
    if k < 1:
        raise ValueError("rollout length must be at least 1")
    obs = np.atleast_2d(np.asarray(start_obs, dtype=float))
    parts = []
    for _ in range(k):
        action = np.atleast_2d(policy(obs))
        next_obs, reward = model.predict(obs, action, member=member, rng=rng, deterministic=deterministic)
        parts.append(Transitions(obs, action, next_obs, reward, np.zeros(len(obs))))
        obs = next_obs
    return Transitions.concat(parts)


def mask_rollouts(transitions: Transitions, scores: np.ndarray, keep_fraction: float) -> Transitions:
    """Keep the ceil(keep_fraction * n) least uncertain transitions, in original order."""
    scores = np.asarray(scores, dtype=float)
    n = len(transitions)
    if len(scores) != n:
        raise ValueError(f"{len(scores)} scores for {n} transitions")
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    keep = math.ceil(keep_fraction * n)
    chosen = np.sort(np.argsort(scores, kind="stable")[:keep])
    return transitions.take(chosen)
