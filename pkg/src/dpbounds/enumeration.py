"""Exact conditional expectations and exact improvement on finite-support models.

Leaves of the support tree are laid out lexicographically (first step slowest),
so a leaf-indexed array reshapes to the per-step atom grid and conditional
expectations become tensor contractions against the per-step probabilities.
This is the enumeration mode of the nested estimators: the middle layer is
replaced by the full support with exact probabilities, which makes improvement
steps exact operators and lets the iteration be run to its fixed point.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .core import (
    DynamicProgramSpec,
    FiniteSupportModel,
    InadmissibleControlError,
    PathBatch,
    SolutionTree,
    SupportSizeError,
    simulate_paths,
)

__all__ = [
    "SupportEnumeration",
    "tree_to_leaf_values",
    "improve_upper_exact",
    "improve_lower_exact",
]


@dataclass
class SupportEnumeration:
    """All leaves of a finite-support model with their probabilities."""

    model: FiniteSupportModel
    shape: tuple
    paths: PathBatch
    leaf_probs: np.ndarray

    @classmethod
    def build(cls, model: FiniteSupportModel, max_leaves: int = 10**6) -> "SupportEnumeration":
        sizes = model.support_sizes()
        n_leaves = 1
        for s in sizes:
            n_leaves *= s
            if n_leaves > max_leaves:
                raise SupportSizeError(f"enumeration exceeds {max_leaves} leaves")
        J = model.horizon
        innovations = np.empty((n_leaves, J, model.innovation_dim))
        for leaf, combo in enumerate(product(*[range(s) for s in sizes])):
            for t, atom in enumerate(combo):
                innovations[leaf, t] = model.support[t][atom]
        probs = np.ones(n_leaves)
        for leaf, combo in enumerate(product(*[range(s) for s in sizes])):
            for t, atom in enumerate(combo):
                probs[leaf] *= model.probabilities[t][atom]
        return cls(model=model, shape=tuple(sizes), paths=simulate_paths(model, innovations),
                   leaf_probs=probs)

    @property
    def n_leaves(self) -> int:
        return self.paths.n_paths

    def cond_exp(self, values: np.ndarray, t: int) -> np.ndarray:
        """E_t of a leaf-indexed array, broadcast back to leaves.

        ``values`` has shape (n_leaves, ...); the result is constant across
        leaves sharing the first t innovations.
        """
        J = len(self.shape)
        extra = values.shape[1:]
        arr = values.reshape(self.shape + extra)
        for ax in range(J - 1, t - 1, -1):
            arr = np.tensordot(arr, self.model.probabilities[ax], axes=(ax, 0))
        arr = arr.reshape(self.shape[:t] + (1,) * (J - t) + extra)
        arr = np.broadcast_to(arr, self.shape + extra)
        return arr.reshape((self.n_leaves,) + extra)

    def weights(self, t: int) -> np.ndarray:
        """beta_{t+1} per leaf, shape (n_leaves, D)."""
        return self.model.weights(self.paths.innovations[:, t])

    def expectation(self, values: np.ndarray) -> float:
        return float(self.leaf_probs @ values)


def tree_to_leaf_values(tree: SolutionTree, enum: SupportEnumeration) -> np.ndarray:
    """Solution values per (leaf, time), shape (n_leaves, J+1)."""
    idx = enum.model.atom_indices(enum.paths.innovations)
    J = tree.horizon
    out = np.empty((enum.n_leaves, J + 1))
    for leaf in range(enum.n_leaves):
        for t in range(J + 1):
            out[leaf, t] = tree.nodes[tuple(idx[leaf, :t])].value
    return out


def _doob_increments(dp: DynamicProgramSpec, enum: SupportEnumeration,
                     theta: np.ndarray) -> np.ndarray:
    """Exact Doob-style increments of the previous iterate, per (leaf, t, D).

    Increment for the step t -> t+1 is
    beta_{t+1} E_{t+1}[theta_{t+1}] - E_t[beta_{t+1} theta_{t+1}].
    """
    J = dp.horizon
    out = np.empty((enum.n_leaves, J, dp.weight_dim))
    for t in range(J):
        beta = enum.weights(t)
        weighted = enum.cond_exp(beta * theta[:, t + 1, None], t)
        plain = theta[:, J] if t + 1 == J else enum.cond_exp(theta[:, t + 1], t + 1)
        out[:, t] = beta * plain[:, None] - weighted
    return out


def improve_upper_exact(dp: DynamicProgramSpec, enum: SupportEnumeration,
                        theta_prev: np.ndarray) -> np.ndarray:
    """One exact improvement step of the upper recursion.

    ``theta_prev`` is the previous iterate per (leaf, time); its terminal
    column must equal the terminal payoff (the iteration pins it there).
    Returns the next iterate with the Doob increments of ``theta_prev``.
    """
    J = dp.horizon
    dM = _doob_increments(dp, enum, theta_prev)
    theta = np.empty_like(theta_prev)
    theta[:, J] = dp.terminal(enum.paths.states[:, J])
    for t in range(J - 1, -1, -1):
        beta = enum.weights(t)
        z = beta * theta[:, t + 1, None] - dM[:, t]
        theta[:, t] = dp.generator(t, enum.paths.states[:, t], z)
    return theta


def improve_lower_exact(dp: DynamicProgramSpec, enum: SupportEnumeration,
                        theta_prev: np.ndarray, martingale: str = "doob") -> np.ndarray:
    """One exact improvement step of the lower recursion.

    The control is the Fenchel maximizer at the exact conditional expectation
    of the weighted previous iterate.  ``martingale`` selects the control
    variate of the new recursion: "doob" (exact Doob increments of the
    previous iterate, pathwise-tight at termination) or "zero" (none; the
    conditional means are unaffected).
    """
    if martingale not in ("doob", "zero"):
        raise ValueError(f"unknown martingale option {martingale!r}")
    J = dp.horizon
    dM = (_doob_increments(dp, enum, theta_prev) if martingale == "doob"
          else np.zeros((enum.n_leaves, J, dp.weight_dim)))
    theta = np.empty_like(theta_prev)
    theta[:, J] = dp.terminal(enum.paths.states[:, J])
    for t in range(J - 1, -1, -1):
        beta = enum.weights(t)
        z_hat = enum.cond_exp(beta * theta_prev[:, t + 1, None], t)
        r = np.asarray(dp.maximizer(t, enum.paths.states[:, t], z_hat))
        fstar = np.asarray(dp.conjugate_value(t, enum.paths.states[:, t], r), dtype=float)
        if not np.all(np.isfinite(fstar)):
            raise InadmissibleControlError(
                f"maximizer left the conjugate domain at time {t}", time_index=t)
        inner = beta * theta[:, t + 1, None] - dM[:, t]
        theta[:, t] = np.einsum("nd,nd->n", r, inner) - fstar
    return theta
