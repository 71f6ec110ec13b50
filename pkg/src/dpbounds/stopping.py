"""Finite-support optimal stopping instances (the exact-solver test bed).

The stopping problem Y_j = max(S_j, E_j[Y_{j+1}]) is the simplest member of
the convex dynamic program family: weight dimension one, weight identically
one, generator max(reward, z).  Its conjugate is piecewise linear with
effective domain [0, 1], where the control value 1 means "continue" and 0
means "stop".  Because the innovations have finite support, everything about
these instances can be enumerated exactly, which is what the oracle tests do.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import DynamicProgramSpec, FiniteSupportModel

__all__ = [
    "StoppingParams",
    "stopping_model",
    "binomial_preset",
    "running_max_stopping_family",
]


def _default_reward(j, x):
    return np.asarray(x)[..., 0]


@dataclass(frozen=True)
class StoppingParams:
    """Multiplicative finite-support dynamics with an exercisable reward.

    ``multipliers[t]`` and ``probabilities[t]`` describe the factor applied to
    the state at step t+1; ``reward(j, x)`` is the exercise value S_j.
    """

    horizon: int
    x0: float = 1.0
    multipliers: tuple = ()
    probabilities: tuple = ()
    reward: Callable = _default_reward

    def __post_init__(self):
        if len(self.multipliers) != self.horizon or len(self.probabilities) != self.horizon:
            raise ValueError("need one multiplier/probability set per step")
        for p in self.probabilities:
            if abs(sum(p) - 1.0) > 1e-12:
                raise ValueError("step probabilities must sum to 1")


def stopping_model(params: StoppingParams) -> tuple[DynamicProgramSpec, FiniteSupportModel]:
    """Build the dynamic program and finite-support model of a stopping problem.

    The innovation vector is (1, multiplier): its first component is the
    (constant) weight, the second drives the state.  The maximizer returns
    [1] when continuing (z >= S_j) and [0] when stopping; the conjugate value
    encodes the reward, f_j^*(u) = -S_j (1 - u) on 0 <= u <= 1.
    """
    reward = params.reward

    def step(j, x, b):
        return np.asarray(x) * np.asarray(b)[..., 1:2]

    def generator(j, x, z):
        return np.maximum(reward(j, x), np.asarray(z)[..., 0])

    def maximizer(j, x, z):
        cont = np.asarray(z)[..., 0] >= reward(j, x)
        return np.where(cont[..., None], 1.0, 0.0)

    def conjugate_value(j, x, u):
        u0 = np.asarray(u)[..., 0]
        inside = (u0 >= -1e-12) & (u0 <= 1.0 + 1e-12)
        return np.where(inside, -reward(j, x) * (1.0 - u0), np.inf)

    def terminal(x):
        return reward(params.horizon, x)

    support = tuple(
        np.column_stack([np.ones(len(m)), np.asarray(m, dtype=float)])
        for m in params.multipliers)
    probs = tuple(np.asarray(p, dtype=float) for p in params.probabilities)

    model = FiniteSupportModel(
        x0=np.array([params.x0]), horizon=params.horizon, state_dim=1,
        innovation_dim=2, weight_dim=1, step=step, sample_innovation=None,
        constant_weight_index=0, support=support, probabilities=probs)
    dp = DynamicProgramSpec(
        horizon=params.horizon, weight_dim=1, generator=generator,
        conjugate_value=conjugate_value, maximizer=maximizer, terminal=terminal)
    return dp, model


def binomial_preset(horizon: int = 2, up: float = 2.0, down: float = 0.5,
                    p_up: float = 0.5) -> StoppingParams:
    """The doubling/halving binomial tree used throughout the oracle tests."""
    return StoppingParams(
        horizon=horizon, x0=1.0,
        multipliers=tuple((up, down) for _ in range(horizon)),
        probabilities=tuple((p_up, 1.0 - p_up) for _ in range(horizon)))


def running_max_stopping_family(params: StoppingParams, enum) -> np.ndarray:
    """Consistent family of stopping times on an enumerated support tree.

    tau_l is the first time i >= l at which the reward equals its running
    maximum (capped at the horizon).  The family is consistent: tau_l >= l,
    and tau_l > l implies tau_l = tau_{l+1}.  Returns an integer array of
    shape (horizon + 1, n_leaves) with tau_l per leaf.
    """
    J = params.horizon
    states = enum.paths.states
    rewards = np.stack([params.reward(j, states[:, j]) for j in range(J + 1)], axis=1)
    running = np.maximum.accumulate(rewards, axis=1)
    at_max = rewards >= running - 1e-15
    taus = np.empty((J + 1, enum.n_leaves), dtype=np.int64)
    for l in range(J + 1):
        hit = at_max[:, l:]
        first = np.argmax(hit, axis=1)
        none = ~hit.any(axis=1)
        taus[l] = l + np.where(none, hit.shape[1] - 1, first)
    return taus
