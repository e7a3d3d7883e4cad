"""Small numpy MLPs with hand-derived backward passes, Adam and Gaussian heads."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
CHECKPOINT_VERSION = 1
ACTION_BOUND = 1.0 - 1e-9


class NoForwardRecord(RuntimeError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class Tape:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]


class Mlp:
    """Fully connected net: ReLU hidden layers, linear output.

    ``forward`` accepts a single vector or a batch (rows). ``forward_record``
    additionally returns the activations needed by ``backward``.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None) -> None:
        if len(sizes) < 2:
            raise ValueError("need input and output widths")
        self.sizes = tuple(int(s) for s in sizes)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            self.params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.params.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def names(self) -> list[str]:
        return [f"{kind}{i}" for i in range(len(self.sizes) - 1) for kind in ("W", "b")]

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"input width {x.shape[-1]} != {self.sizes[0]}")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = self._check(x)
        for i in range(self.n_layers):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < self.n_layers - 1:
                h = np.maximum(h, 0.0)
        return h

    __call__ = forward

    def forward_record(self, x: np.ndarray) -> tuple[np.ndarray, Tape]:
        h = self._check(x)
        if h.ndim == 1:
            h = h[None, :]
        tape = Tape([], [])
        for i in range(self.n_layers):
            tape.inputs.append(h)
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            tape.pre.append(z)
            h = np.maximum(z, 0.0) if i < self.n_layers - 1 else z
        return h, tape

    def backward(self, tape: Tape | None, upstream: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of ``sum(output * upstream)`` w.r.t. parameters and input."""
        if tape is None:
            raise NoForwardRecord("backward called without a recorded forward pass")
        g = np.asarray(upstream, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                g = g * (tape.pre[i] > 0)
            grads[2 * i] = tape.inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
        return grads, g

    def copy(self) -> Mlp:
        other = Mlp.__new__(Mlp)
        other.sizes = self.sizes
        other.params = [p.copy() for p in self.params]
        return other

    def load_from(self, other: Mlp) -> None:
        for dst, src in zip(self.params, other.params):
            dst[...] = src

    def polyak_from(self, other: Mlp, tau: float) -> None:
        """self <- (1 - tau) * self + tau * other"""
        for dst, src in zip(self.params, other.params):
            dst *= 1.0 - tau
            dst += tau * src

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, values: np.ndarray) -> None:
        offset = 0
        for p in self.params:
            n = p.size
            p[...] = values[offset:offset + n].reshape(p.shape)
            offset += n


def save_mlps(nets: dict[str, Mlp], extra: dict[str, np.ndarray] | None = None) -> bytes:
    """Serialize nets (shapes + raw float64 parameters) into an ``.npz`` blob."""
    arrays: dict[str, np.ndarray] = {"__version__": np.array(CHECKPOINT_VERSION)}
    for name, net in nets.items():
        arrays[f"{name}/sizes"] = np.array(net.sizes, dtype=np.int64)
        for pname, p in zip(net.names, net.params):
            arrays[f"{name}/{pname}"] = p
    for key, value in (extra or {}).items():
        arrays[f"extra/{key}"] = np.asarray(value)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def load_mlps(blob: bytes) -> tuple[dict[str, Mlp], dict[str, np.ndarray]]:
    with np.load(io.BytesIO(blob), allow_pickle=False) as data:
        version = int(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        nets: dict[str, Mlp] = {}
        extra: dict[str, np.ndarray] = {}
        for key in data.files:
            if key.endswith("/sizes"):
                name = key[: -len("/sizes")]
                net = Mlp(tuple(int(s) for s in data[key]))
                net.params = [np.array(data[f"{name}/{p}"]) for p in net.names]
                nets[name] = net
            elif key.startswith("extra/"):
                extra[key[len("extra/"):]] = np.array(data[key])
    return nets, extra


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, names: Sequence[str] | None = None) -> None:
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.names = list(names) if names is not None else [str(i) for i in range(len(params))]
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient count does not match parameters")
        for name, p, g in zip(self.names, self.params, grads):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter {name} shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in parameter block {name}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clamp_log_std(raw: np.ndarray, lo: float = LOG_STD_MIN, hi: float = LOG_STD_MAX) -> tuple[np.ndarray, np.ndarray]:
    """Hard clamp; returns the clamped values and the pass-through mask for gradients."""
    return np.clip(raw, lo, hi), ((raw >= lo) & (raw <= hi)).astype(float)


def gaussian_nll(mean: np.ndarray, log_std: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Negative log-likelihood summed over dimensions, averaged over rows.

    Returns ``(loss, d_loss/d_mean, d_loss/d_log_std)``.
    """
    mean, log_std, target = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (mean, log_std, target))
    n = mean.shape[0]
    inv_var = np.exp(-2.0 * log_std)
    err = mean - target
    loss = 0.5 * np.sum(err * err * inv_var + 2.0 * log_std + LOG_2PI) / n
    d_mean = err * inv_var / n
    d_log_std = (1.0 - err * err * inv_var) / n
    return float(loss), d_mean, d_log_std


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def squashed_gaussian_sample(mean: np.ndarray, log_std: np.ndarray, noise: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reparameterized tanh-Gaussian sample.

    Returns ``(action, log_prob, pre_tanh)`` with log_prob summed over the last axis.
    """
    mean = np.asarray(mean, dtype=float)
    log_std = np.asarray(log_std, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if noise.shape != mean.shape:
        raise ValueError(f"noise shape {noise.shape} != {mean.shape}")
    u = mean + np.exp(log_std) * noise
    # float tanh saturates to exactly +/-1 for |u| > ~19
    a = np.clip(np.tanh(u), -ACTION_BOUND, ACTION_BOUND)
    gauss = -0.5 * noise * noise - log_std - 0.5 * LOG_2PI
    # log(1 - tanh(u)^2) = 2 * (log 2 - u - softplus(-2u))
    log_det = 2.0 * (math.log(2.0) - u - softplus(-2.0 * u))
    return a, np.sum(gauss - log_det, axis=-1), u
