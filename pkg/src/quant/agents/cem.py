"""Cross-entropy-method planning over a learned dynamics model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dynamics import UntrainedModel

STD_FLOOR = 0.05


@dataclass
class CemPlanner:
    action_dim: int
    horizon: int = 5
    population: int = 100
    elites: int = 10
    iterations: int = 5
    init_std: float = 0.5
    std_floor: float = STD_FLOOR

    def __post_init__(self) -> None:
        if self.horizon < 1 or self.population < 1:
            raise ValueError("horizon and population must be positive")
        if not 1 <= self.elites <= self.population:
            raise ValueError("elite count must lie in 1..population")
        if self.std_floor <= 0:
            raise ValueError("std floor must be positive")


def refit(samples: np.ndarray, returns: np.ndarray, n_elites: int, std_floor: float) -> tuple[np.ndarray, np.ndarray]:
    """Mean and (floored) std of the ``n_elites`` highest-return samples."""
    order = np.argsort(-returns, kind="stable")[:n_elites]
    elite = samples[order]
    return elite.mean(axis=0), np.maximum(elite.std(axis=0), std_floor)


def sequence_returns(model, obs: np.ndarray, sequences: np.ndarray) -> np.ndarray:
    """Undiscounted return of each action sequence, averaged over elite members' mean predictions."""
    pop, horizon, _ = sequences.shape
    totals = np.zeros(pop)
    for member in model.elites:
        state = np.repeat(np.atleast_2d(obs), pop, axis=0)
        for h in range(horizon):
            state, reward = model.predict(state, sequences[:, h], member=member, deterministic=True)
            totals += reward
    return totals / len(model.elites)


def cem_plan(planner: CemPlanner, model, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """First action of the refined action-sequence mean, in [-1, 1]."""
    if not getattr(model, "trained", False):
        raise UntrainedModel("CEM planning needs a trained dynamics model")
    shape = (planner.horizon, planner.action_dim)
    mean = np.zeros(shape)
    std = np.full(shape, planner.init_std)
    for _ in range(planner.iterations):
        samples = np.clip(mean + std * rng.standard_normal((planner.population, *shape)), -1.0, 1.0)
        returns = sequence_returns(model, obs, samples)
        mean, std = refit(samples, returns, planner.elites, planner.std_floor)
    return np.clip(mean[0], -1.0, 1.0)


class PetsController:
    """Acts by CEM planning through the ensemble at every step."""

    def __init__(self, planner: CemPlanner, model, rng: np.random.Generator) -> None:
        self.planner = planner
        self.model = model
        self.rng = rng

    def act(self, obs: np.ndarray, deterministic: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        return cem_plan(self.planner, self.model, obs, rng if rng is not None else self.rng)
