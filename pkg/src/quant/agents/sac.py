"""Soft actor-critic with twin critics, Polyak targets and a fixed entropy weight."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..dynamics import Transitions
from ..nn import Adam, Mlp, clamp_log_std, load_mlps, save_mlps, squashed_gaussian_sample


class NonFiniteLoss(FloatingPointError):
    pass


def entropy(log_probs: np.ndarray) -> float:
    """Monte-Carlo entropy estimate: mean of -log p over a batch of samples."""
    log_probs = np.asarray(log_probs, dtype=float)
    if log_probs.size == 0:
        raise ValueError("entropy of an empty batch")
    return float(-log_probs.mean())


@dataclass
class LossReport:
    q_loss: float
    pi_loss: float
    entropy: float


class SacAgent:
    """Policy pi(a|s) as a tanh-squashed Gaussian plus twin Q networks and their targets."""

    def __init__(self, obs_dim: int, action_dim: int, hidden: Sequence[int] = (64, 64),
                 gamma: float = 0.99, tau: float = 0.005, alpha: float = 0.2,
                 lr_q: float = 3e-4, lr_pi: float = 3e-4,
                 rng: np.random.Generator | None = None) -> None:
        if not 0.0 < gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.gamma = gamma
        self.tau = tau
        self.alpha = alpha
        self.policy = Mlp((obs_dim, *hidden, 2 * action_dim), rng)
        self.q1 = Mlp((obs_dim + action_dim, *hidden, 1), rng)
        self.q2 = Mlp((obs_dim + action_dim, *hidden, 1), rng)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.pi_optim = Adam(self.policy.params, lr=lr_pi, names=self.policy.names)
        self.q1_optim = Adam(self.q1.params, lr=lr_q, names=self.q1.names)
        self.q2_optim = Adam(self.q2.params, lr=lr_q, names=self.q2.names)

    def head(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self.policy.forward(np.atleast_2d(obs))
        mean, raw = out[:, :self.action_dim], out[:, self.action_dim:]
        return mean, clamp_log_std(raw)[0]

    def sample(self, obs: np.ndarray, noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mean, log_std = self.head(obs)
        a, logp, _ = squashed_gaussian_sample(mean, log_std, noise)
        return a, logp

    def act(self, obs: np.ndarray, deterministic: bool = False,
            rng: np.random.Generator | None = None) -> np.ndarray:
        """Normalized action in (-1, 1); caller scales to shares."""
        obs = np.asarray(obs, dtype=float)
        single = obs.ndim == 1
        mean, log_std = self.head(obs)
        if deterministic:
            a = np.tanh(mean)
        else:
            if rng is None:
                raise ValueError("stochastic actions need an rng")
            a, _, _ = squashed_gaussian_sample(mean, log_std, rng.standard_normal(mean.shape))
        return a[0] if single else a

    select_action = act

    def q_values(self, obs: np.ndarray, action: np.ndarray, target: bool = False) -> tuple[np.ndarray, np.ndarray]:
        x = np.concatenate([np.atleast_2d(obs), np.atleast_2d(action)], axis=1)
        n1, n2 = (self.q1_target, self.q2_target) if target else (self.q1, self.q2)
        return n1.forward(x)[:, 0], n2.forward(x)[:, 0]

    def nets(self) -> dict[str, Mlp]:
        return {"policy": self.policy, "q1": self.q1, "q2": self.q2,
                "q1_target": self.q1_target, "q2_target": self.q2_target}

    def to_bytes(self, extra: dict[str, np.ndarray] | None = None) -> bytes:
        meta = {"sac": np.array([self.gamma, self.tau, self.alpha])}
        meta.update(extra or {})
        return save_mlps(self.nets(), meta)

    @classmethod
    def from_bytes(cls, blob: bytes) -> tuple[SacAgent, dict[str, np.ndarray]]:
        nets, extra = load_mlps(blob)
        gamma, tau, alpha = (float(v) for v in extra.pop("sac"))
        policy = nets["policy"]
        agent = cls(policy.sizes[0], policy.sizes[-1] // 2, hidden=policy.sizes[1:-1],
                    gamma=gamma, tau=tau, alpha=alpha)
        for name, net in nets.items():
            getattr(agent, name).load_from(net)
        return agent, extra


def q_target(batch: Transitions, agent: SacAgent, noise: np.ndarray) -> np.ndarray:
    """Clipped double-Q soft target, with next actions drawn from the current policy."""
    a_next, logp_next = agent.sample(batch.next_obs, noise)
    t1, t2 = agent.q_values(batch.next_obs, a_next, target=True)
    soft = np.minimum(t1, t2) - agent.alpha * logp_next
    return batch.reward + agent.gamma * (1.0 - batch.done) * soft


def q_loss_grads(net: Mlp, obs: np.ndarray, action: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Mean squared TD error of one critic and its parameter gradients."""
    q, tape = net.forward_record(np.concatenate([obs, action], axis=1))
    err = q[:, 0] - y
    grads, _ = net.backward(tape, (2.0 * err / len(y))[:, None])
    return float(np.mean(err * err)), grads


def policy_loss_grads(agent: SacAgent, obs: np.ndarray, noise: np.ndarray) -> tuple[float, list[np.ndarray], np.ndarray]:
    """Reparameterized objective mean(alpha * log pi(a|s) - min_j Q_j(s, a)).

    Returns the loss, gradients for the policy parameters and the log-probs.
    """
    obs = np.atleast_2d(obs)
    n, d = len(obs), agent.action_dim
    out, tape = agent.policy.forward_record(obs)
    mean, raw = out[:, :d], out[:, d:]
    log_std, pass_mask = clamp_log_std(raw)
    a, logp, u = squashed_gaussian_sample(mean, log_std, noise)

    x = np.concatenate([obs, a], axis=1)
    q1, tape1 = agent.q1.forward_record(x)
    q2, tape2 = agent.q2.forward_record(x)
    use1 = q1[:, 0] <= q2[:, 0]
    q_min = np.where(use1, q1[:, 0], q2[:, 0])
    loss = float(np.mean(agent.alpha * logp - q_min))

    # dL/da from the selected critic; input gradients only, critics are not stepped here
    w1 = use1.astype(float)
    _, dx1 = agent.q1.backward(tape1, (-w1 / n)[:, None])
    _, dx2 = agent.q2.backward(tape2, (-(1.0 - w1) / n)[:, None])
    d_a = (dx1 + dx2)[:, -d:]
    tanh_u = np.tanh(u)
    # log-det term contributes d/du[-log(1 - tanh^2 u)] = 2 tanh u
    d_u = d_a * (1.0 - tanh_u**2) + (agent.alpha / n) * 2.0 * tanh_u
    d_mean = d_u
    d_log_std = (d_u * np.exp(log_std) * noise - agent.alpha / n) * pass_mask
    grads, _ = agent.policy.backward(tape, np.concatenate([d_mean, d_log_std], axis=1))
    return loss, grads, logp


def sac_update(agent: SacAgent, batch: Transitions, rng: np.random.Generator,
               lr_q: float | None = None, lr_pi: float | None = None) -> LossReport:
    """One critic step, one policy step and a Polyak target update.

    Losses in the report are measured before the respective parameter step.
    """
    if len(batch) < 1:
        raise ValueError("empty batch")
    if lr_q is not None:
        agent.q1_optim.lr = agent.q2_optim.lr = lr_q
    if lr_pi is not None:
        agent.pi_optim.lr = lr_pi
    d = agent.action_dim
    y = q_target(batch, agent, rng.standard_normal((len(batch), d)))
    l1, g1 = q_loss_grads(agent.q1, batch.obs, batch.action, y)
    l2, g2 = q_loss_grads(agent.q2, batch.obs, batch.action, y)
    q_loss = l1 + l2
    pi_loss, g_pi, logp = policy_loss_grads(agent, batch.obs, rng.standard_normal((len(batch), d)))
    if not (math.isfinite(q_loss) and math.isfinite(pi_loss)):
        raise NonFiniteLoss(f"non-finite SAC loss (q={q_loss}, pi={pi_loss}); "
                            f"reward range [{batch.reward.min():.3g}, {batch.reward.max():.3g}]")
    agent.q1_optim.step(g1)
    agent.q2_optim.step(g2)
    agent.pi_optim.step(g_pi)
    agent.q1_target.polyak_from(agent.q1, agent.tau)
    agent.q2_target.polyak_from(agent.q2, agent.tau)
    return LossReport(q_loss, pi_loss, entropy(logp))
