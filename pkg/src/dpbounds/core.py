"""Convex dynamic program abstraction and an exact solver for finite-support models.

The object of study is the backward recursion

    Y_j = f_j(X_j, E_j[beta_{j+1} Y_{j+1}]),   j = J-1, ..., 0,   Y_J = g(X_J),

driven by a Markov state X_j = h_j(X_{j-1}, B_j) whose innovation vector B_j
carries the weight vector beta_j in its first D components.  The generator
f_j is convex in its vector argument and comes with a closed-form convex
conjugate and a maximizer attaining the Fenchel equality; these three callables
plus the terminal payoff define a :class:`DynamicProgramSpec`.

All model callables are vectorized: they accept arrays with arbitrary leading
batch dimensions and must be pure (no shared mutable state), so callers may
evaluate them from many workers simultaneously.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "DynamicProgramSpec",
    "MarkovModel",
    "FiniteSupportModel",
    "PathBatch",
    "simulate_paths",
    "SolutionTree",
    "TreeNode",
    "solve_exact",
    "check_monotonicity",
    "check_comparison",
    "MonotonicityReport",
    "SupportSizeError",
    "NumericEvaluationError",
    "StructureError",
    "InadmissibleControlError",
]

COMPARISON_TOL = 1e-10


class SupportSizeError(ValueError):
    """Enumerating the model would exceed the configured node budget."""


class NumericEvaluationError(ArithmeticError):
    """A model callable produced a non-finite value; carries (time, location)."""

    def __init__(self, message: str, time_index: int, where=None):
        super().__init__(message)
        self.time_index = time_index
        self.where = where


class StructureError(ValueError):
    """Mismatched tree shapes or a path that does not live on the model support."""


class InadmissibleControlError(ValueError):
    """A control left the effective domain of the convex conjugate."""

    def __init__(self, message: str, time_index: int):
        super().__init__(message)
        self.time_index = time_index


@dataclass(frozen=True, kw_only=True)
class DynamicProgramSpec:
    """Data of a convex dynamic programming equation in Markovian form.

    generator(j, x, z)        -- f_j(x, z), convex in z, shape (...,)
    conjugate_value(j, x, u)  -- convex conjugate f_j^*(x, u); +inf outside the
                                 effective domain
    maximizer(j, x, z)        -- deterministic selector of a u attaining
                                 u . z - f_j^*(x, u) = f_j(x, z), shape (..., D)
    terminal(x)               -- terminal payoff g(x), shape (...,)
    """

    horizon: int
    weight_dim: int
    generator: Callable
    conjugate_value: Callable
    maximizer: Callable
    terminal: Callable

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.weight_dim < 1:
            raise ValueError("weight_dim must be >= 1")


@dataclass(frozen=True, kw_only=True)
class MarkovModel:
    """Forward model X_j = step(j, X_{j-1}, B_j) with innovation sampler.

    The innovation vector B_j has dimension innovation_dim >= weight_dim and
    its first weight_dim components are the weights beta_j.  ``step`` must be
    deterministic given (j, x, b).
    """

    x0: np.ndarray
    horizon: int
    state_dim: int
    innovation_dim: int
    weight_dim: int
    step: Callable
    sample_innovation: Callable
    constant_weight_index: int | None = 0

    def __post_init__(self):
        if self.innovation_dim < self.weight_dim:
            raise ValueError("innovation_dim must be >= weight_dim")
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))

    def weights(self, b: np.ndarray) -> np.ndarray:
        """beta extracted as the first weight_dim innovation components."""
        return np.asarray(b)[..., : self.weight_dim]


@dataclass(frozen=True, kw_only=True)
class FiniteSupportModel(MarkovModel):
    """Markov model whose innovation at each step takes finitely many values.

    ``support[t]`` holds the atoms of B_{t+1} as an (n_t, innovation_dim)
    array and ``probabilities[t]`` their strictly positive weights, summing
    to one per step.
    """

    support: tuple = ()
    probabilities: tuple = ()

    def __post_init__(self):
        super().__post_init__()
        if len(self.support) != self.horizon or len(self.probabilities) != self.horizon:
            raise ValueError("support and probabilities must have one entry per step")
        sup = tuple(np.atleast_2d(np.asarray(a, dtype=float)) for a in self.support)
        probs = tuple(np.asarray(p, dtype=float) for p in self.probabilities)
        for t, (a, p) in enumerate(zip(sup, probs)):
            if a.shape[0] != p.shape[0]:
                raise ValueError(f"step {t}: atom/probability count mismatch")
            if a.shape[1] != self.innovation_dim:
                raise ValueError(f"step {t}: atoms must have innovation_dim columns")
            if np.any(p <= 0.0) or abs(p.sum() - 1.0) > 1e-12:
                raise ValueError(f"step {t}: probabilities must be positive and sum to 1")
        object.__setattr__(self, "support", sup)
        object.__setattr__(self, "probabilities", probs)
        if self.sample_innovation is None:
            def _sample(j, rng, size):
                idx = rng.choice(len(probs[j - 1]), size=size, p=probs[j - 1])
                return sup[j - 1][idx]
            object.__setattr__(self, "sample_innovation", _sample)

    def support_sizes(self) -> tuple[int, ...]:
        return tuple(a.shape[0] for a in self.support)

    def atom_indices(self, innovations: np.ndarray) -> np.ndarray:
        """Map innovation rows (n, J, innovation_dim) to per-step atom indices.

        Matching is by exact float equality: paths must have been produced
        from this model's own atom arrays.  Raises StructureError otherwise.
        """
        innovations = np.asarray(innovations)
        n, J, _ = innovations.shape
        out = np.empty((n, J), dtype=np.int64)
        for t in range(J):
            atoms = self.support[t]
            eq = np.all(innovations[:, t, None, :] == atoms[None, :, :], axis=-1)
            hit = eq.any(axis=1)
            if not np.all(hit):
                bad = int(np.flatnonzero(~hit)[0])
                raise StructureError(
                    f"innovation at path {bad}, step {t + 1} is not a support atom")
            out[:, t] = eq.argmax(axis=1)
        return out


@dataclass
class PathBatch:
    """A batch of simulated paths: states (n, J+1, N), innovations (n, J, dD).

    ``innovations[:, t]`` is B_{t+1}, the innovation that produced
    ``states[:, t+1]``.
    """

    states: np.ndarray
    innovations: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.innovations.shape[1]

    def take(self, sel) -> "PathBatch":
        return PathBatch(self.states[sel], self.innovations[sel])


def simulate_paths(model: MarkovModel, innovations: np.ndarray) -> PathBatch:
    """Propagate the state recursion along given innovations."""
    innovations = np.asarray(innovations, dtype=float)
    n, J, _ = innovations.shape
    states = np.empty((n, J + 1, model.state_dim))
    states[:, 0] = model.x0
    for t in range(J):
        states[:, t + 1] = model.step(t + 1, states[:, t], innovations[:, t])
    return PathBatch(states=states, innovations=innovations)


# --------------------------------------------------------------------------- #
# exact solver on finite support
# --------------------------------------------------------------------------- #
@dataclass
class TreeNode:
    state: np.ndarray
    value: float
    cond_weighted: np.ndarray | None  # E_j[beta_{j+1} Y_{j+1}]; None at the horizon


@dataclass
class SolutionTree:
    """Exact solution on the full prefix tree of a finite-support model.

    Nodes are keyed by the tuple of atom indices of the innovations consumed
    so far; the root key is ().
    """

    horizon: int
    nodes: dict

    def value(self, prefix: tuple) -> float:
        return self.nodes[tuple(prefix)].value

    def cond_weighted(self, prefix: tuple) -> np.ndarray:
        return self.nodes[tuple(prefix)].cond_weighted

    @property
    def root_value(self) -> float:
        return self.nodes[()].value


def solve_exact(dp: DynamicProgramSpec, model: FiniteSupportModel,
                max_nodes: int = 10**6) -> SolutionTree:
    """Solve the dynamic program exactly by enumerating the support tree.

    Conditional expectations are finite sums over the per-step atoms, so the
    returned values are exact up to floating point.  Guards against blow-up
    when the product of support sizes exceeds ``max_nodes``.
    """
    sizes = model.support_sizes()
    total = 1
    for s in sizes:
        total *= s
        if total > max_nodes:
            raise SupportSizeError(
                f"support tree has more than {max_nodes} leaves ({sizes})")

    J = dp.horizon
    nodes: dict = {}

    def build(prefix: tuple, state: np.ndarray) -> float:
        j = len(prefix)
        if j == J:
            y = float(dp.terminal(state[None, :])[0])
            nodes[prefix] = TreeNode(state=state, value=y, cond_weighted=None)
            return y
        atoms = model.support[j]
        probs = model.probabilities[j]
        z = np.zeros(dp.weight_dim)
        for i in range(atoms.shape[0]):
            child_state = np.asarray(model.step(j + 1, state[None, :], atoms[i][None, :]))[0]
            y_child = build(prefix + (i,), child_state)
            z += probs[i] * model.weights(atoms[i]) * y_child
        y = float(dp.generator(j, state[None, :], z[None, :])[0])
        if not np.isfinite(y):
            raise NumericEvaluationError(
                f"generator returned non-finite value at time {j}, node {prefix}",
                time_index=j, where=prefix)
        nodes[prefix] = TreeNode(state=state, value=y, cond_weighted=z)
        return y

    build((), model.x0.copy())
    return SolutionTree(horizon=J, nodes=nodes)


# --------------------------------------------------------------------------- #
# structural checks
# --------------------------------------------------------------------------- #
@dataclass
class MonotonicityReport:
    n_checked: int
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def check_monotonicity(dp: DynamicProgramSpec, model: MarkovModel, samples: int,
                       rng: np.random.Generator, extra_innovations=None,
                       tol: float = 1e-12) -> MonotonicityReport:
    """Sample-based check of the comparison-principle requirement.

    Draws (j, x, z, b) samples and verifies that the Fenchel maximizer u at
    (j, x, z) satisfies u . beta(b) >= -tol.  Violations are collected in the
    report (they are findings, not errors).  ``extra_innovations`` allows
    stress atoms, e.g. a grid of extreme innovations, to be checked on top of
    sampled ones.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    report = MonotonicityReport(n_checked=0)

    def _record(j, x, z, b):
        u = np.asarray(dp.maximizer(j, x[None, :], z[None, :]))[0]
        val = float(u @ model.weights(b))
        report.n_checked += 1
        if val < -tol:
            report.violations.append(
                {"j": int(j), "x": x.copy(), "z": z.copy(), "b": np.asarray(b).copy(),
                 "inner_product": val})

    extra = [] if extra_innovations is None else [np.asarray(b, float) for b in extra_innovations]
    for _ in range(samples):
        j = int(rng.integers(0, dp.horizon))
        # state drawn by simulating the model forward to a random time
        x = model.x0.copy()
        for s in range(j):
            b = model.sample_innovation(s + 1, rng, 1)[0]
            x = np.asarray(model.step(s + 1, x[None, :], b[None, :]))[0]
        z = rng.standard_normal(dp.weight_dim)
        b = model.sample_innovation(j + 1, rng, 1)[0]
        _record(j, x, z, b)
        for b_extra in extra:
            _record(j, x, z, b_extra)
    return report


def check_comparison(low_tree: SolutionTree, up_tree: SolutionTree,
                     tol: float = COMPARISON_TOL) -> bool:
    """True iff the upper tree dominates the lower tree node-for-node."""
    if low_tree.horizon != up_tree.horizon or set(low_tree.nodes) != set(up_tree.nodes):
        raise StructureError("trees do not share the same node set")
    for key, low_node in low_tree.nodes.items():
        if up_tree.nodes[key].value < low_node.value - tol:
            return False
    return True
