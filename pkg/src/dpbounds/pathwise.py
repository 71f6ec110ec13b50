"""Pathwise recursions whose conditional expectations bound the solution.

Two non-adapted processes are computed backward along a batch of paths:

* the upper recursion replaces the conditional expectation of the dynamic
  program by the weighted future value minus a martingale increment, so its
  conditional expectations form a supersolution for any martingale;
* the lower recursion linearizes the convex generator with an admissible
  control, so its conditional expectations form a subsolution for any control
  and any martingale (the martingale only acts as a control variate there).

With the exact Doob martingale of the weighted solution (and, for the lower
recursion, the Fenchel-optimal control) both recursions reproduce the solution
pathwise; providers for that exact case are built from a solution tree.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    DynamicProgramSpec,
    FiniteSupportModel,
    InadmissibleControlError,
    MarkovModel,
    NumericEvaluationError,
    PathBatch,
    SolutionTree,
    StructureError,
)

__all__ = [
    "ZeroMartingale",
    "PrecomputedMartingale",
    "ExactDoobMartingale",
    "ConstantControl",
    "ExactControl",
    "lower_pathwise",
    "upper_pathwise",
    "theta_upper_kernel",
    "theta_lower_kernel",
    "exact_doob",
    "ExactTreeInputs",
]


# --------------------------------------------------------------------------- #
# martingale and control providers
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class ZeroMartingale:
    """The zero martingale (no control variate / no dual correction)."""

    weight_dim: int
    closed_form: bool = True

    def increments(self, j: int, paths: PathBatch) -> np.ndarray:
        return np.zeros((paths.n_paths, self.weight_dim))


@dataclass(frozen=True)
class PrecomputedMartingale:
    """Increments stored as an (n, J, D) array aligned with a path batch."""

    values: np.ndarray
    closed_form: bool = True

    def increments(self, j: int, paths: PathBatch) -> np.ndarray:
        return self.values[:, j]


@dataclass(frozen=True)
class ConstantControl:
    """A fixed control vector with a fixed conjugate value at every time."""

    control_vector: np.ndarray
    conjugate: float = 0.0

    def control(self, j: int, paths: PathBatch) -> np.ndarray:
        return np.broadcast_to(self.control_vector, (paths.n_paths, len(self.control_vector)))

    def conjugate_at(self, j: int, paths: PathBatch) -> np.ndarray:
        return np.full(paths.n_paths, self.conjugate)


class ExactDoobMartingale:
    """Doob martingale of the weighted exact solution on a finite-support model.

    Increment at time j (for the step to j+1) along a path equals
    beta_{j+1} Y_{j+1} - E_j[beta_{j+1} Y_{j+1}], both read off the solution
    tree, so the provider is closed form and needs no nested sampling.
    """

    closed_form = True

    def __init__(self, dp: DynamicProgramSpec, model: FiniteSupportModel,
                 tree: SolutionTree):
        if tree.horizon != dp.horizon:
            raise StructureError("tree horizon does not match the dynamic program")
        self._dp = dp
        self._model = model
        self._tree = tree
        self._cache: dict[bytes, np.ndarray] = {}

    def _indices(self, paths: PathBatch) -> np.ndarray:
        key = paths.innovations.tobytes()
        idx = self._cache.get(key)
        if idx is None:
            idx = self._model.atom_indices(paths.innovations)
            self._cache[key] = idx
        return idx

    def increments(self, j: int, paths: PathBatch) -> np.ndarray:
        idx = self._indices(paths)
        out = np.empty((paths.n_paths, self._dp.weight_dim))
        for i in range(paths.n_paths):
            prefix = tuple(idx[i, :j])
            node = self._tree.nodes.get(prefix)
            if node is None or node.cond_weighted is None:
                raise StructureError(f"prefix {prefix} not in tree")
            child = self._tree.nodes[prefix + (int(idx[i, j]),)]
            beta = self._model.weights(paths.innovations[i, j])
            out[i] = beta * child.value - node.cond_weighted
        return out


class ExactControl:
    """Fenchel-optimal control read off an exact solution tree."""

    def __init__(self, dp: DynamicProgramSpec, model: FiniteSupportModel,
                 tree: SolutionTree):
        self._dp = dp
        self._model = model
        self._tree = tree
        self._cache: dict[bytes, np.ndarray] = {}

    def _indices(self, paths: PathBatch) -> np.ndarray:
        key = paths.innovations.tobytes()
        idx = self._cache.get(key)
        if idx is None:
            idx = self._model.atom_indices(paths.innovations)
            self._cache[key] = idx
        return idx

    def _controls(self, j: int, paths: PathBatch) -> np.ndarray:
        idx = self._indices(paths)
        out = np.empty((paths.n_paths, self._dp.weight_dim))
        for i in range(paths.n_paths):
            prefix = tuple(idx[i, :j])
            node = self._tree.nodes.get(prefix)
            if node is None or node.cond_weighted is None:
                raise StructureError(f"prefix {prefix} not in tree")
            out[i] = np.asarray(
                self._dp.maximizer(j, node.state[None, :], node.cond_weighted[None, :]))[0]
        return out

    def control(self, j: int, paths: PathBatch) -> np.ndarray:
        return self._controls(j, paths)

    def conjugate_at(self, j: int, paths: PathBatch) -> np.ndarray:
        idx = self._indices(paths)
        u = self._controls(j, paths)
        states = np.stack([self._tree.nodes[tuple(idx[i, :j])].state
                           for i in range(paths.n_paths)])
        return np.asarray(self._dp.conjugate_value(j, states, u), dtype=float)


# --------------------------------------------------------------------------- #
# recursions
# --------------------------------------------------------------------------- #
def theta_upper_kernel(dp: DynamicProgramSpec, model: MarkovModel, paths: PathBatch,
                       increments_fn, t0: int = 0) -> np.ndarray:
    """Upper recursion restarted at t0; columns before t0 are left as nan.

    ``increments_fn(t)`` supplies the martingale increment for the step
    t -> t+1 as an (n, D) array.
    """
    J = dp.horizon
    theta = np.full((paths.n_paths, J + 1), np.nan)
    theta[:, J] = dp.terminal(paths.states[:, J])
    for j in range(J - 1, t0 - 1, -1):
        beta = model.weights(paths.innovations[:, j])
        z = beta * theta[:, j + 1, None] - increments_fn(j)
        theta[:, j] = dp.generator(j, paths.states[:, j], z)
        if not np.all(np.isfinite(theta[:, j])):
            bad = int(np.flatnonzero(~np.isfinite(theta[:, j]))[0])
            raise NumericEvaluationError(
                f"upper recursion produced non-finite value at time {j} (path {bad})",
                time_index=j, where=bad)
    return theta


def theta_lower_kernel(dp: DynamicProgramSpec, model: MarkovModel, paths: PathBatch,
                       control_fn, increments_fn, t0: int = 0) -> np.ndarray:
    """Lower recursion restarted at t0; columns before t0 are left as nan.

    ``control_fn(t)`` returns the pair (r_t, f_t^*(r_t)) as ((n, D), (n,));
    a non-finite conjugate is an inadmissible control.
    """
    J = dp.horizon
    theta = np.full((paths.n_paths, J + 1), np.nan)
    theta[:, J] = dp.terminal(paths.states[:, J])
    for j in range(J - 1, t0 - 1, -1):
        r, fstar = control_fn(j)
        fstar = np.asarray(fstar, dtype=float)
        if not np.all(np.isfinite(fstar)):
            raise InadmissibleControlError(
                f"control leaves the conjugate's effective domain at time {j}",
                time_index=j)
        beta = model.weights(paths.innovations[:, j])
        inner = beta * theta[:, j + 1, None] - increments_fn(j)
        theta[:, j] = np.einsum("nd,nd->n", np.asarray(r), inner) - fstar
        if not np.all(np.isfinite(theta[:, j])):
            bad = int(np.flatnonzero(~np.isfinite(theta[:, j]))[0])
            raise NumericEvaluationError(
                f"lower recursion produced non-finite value at time {j} (path {bad})",
                time_index=j, where=bad)
    return theta


def upper_pathwise(dp: DynamicProgramSpec, model: MarkovModel, paths: PathBatch,
                   martingale) -> np.ndarray:
    """Upper recursion along each path; returns values of shape (n, J+1)."""
    return theta_upper_kernel(dp, model, paths,
                              lambda t: martingale.increments(t, paths))


def lower_pathwise(dp: DynamicProgramSpec, model: MarkovModel, paths: PathBatch,
                   control, martingale) -> np.ndarray:
    """Lower recursion along each path; returns values of shape (n, J+1)."""
    return theta_lower_kernel(
        dp, model, paths,
        lambda t: (control.control(t, paths), control.conjugate_at(t, paths)),
        lambda t: martingale.increments(t, paths))


def exact_doob(dp: DynamicProgramSpec, model: FiniteSupportModel,
               tree: SolutionTree) -> ExactDoobMartingale:
    """Doob martingale provider of the weighted solution from an exact tree."""
    return ExactDoobMartingale(dp, model, tree)


@dataclass
class ExactTreeInputs:
    """Input bundle built from an exact solution tree (oracle runs).

    Provides the same surface as the approximation-based input providers:
    closed-form control/martingale plus level-0 evaluators.  Control-variate
    hooks are absent (None), so nested estimators fall back to plain averages.
    """

    dp: DynamicProgramSpec
    model: FiniteSupportModel
    tree: SolutionTree

    def __post_init__(self):
        self.martingale = ExactDoobMartingale(self.dp, self.model, self.tree)
        self.control = ExactControl(self.dp, self.model, self.tree)

    def theta_up(self, paths: PathBatch, t0: int = 0) -> np.ndarray:
        return theta_upper_kernel(self.dp, self.model, paths,
                                  lambda t: self.martingale.increments(t, paths), t0)

    def theta_low(self, paths: PathBatch, t0: int = 0) -> np.ndarray:
        return theta_lower_kernel(
            self.dp, self.model, paths,
            lambda t: (self.control.control(t, paths),
                       self.control.conjugate_at(t, paths)),
            lambda t: self.martingale.increments(t, paths), t0)

    def cv_value(self, j, x_prev, b, x_next=None):
        return None

    def cv_weighted_mean(self, t, x):
        return None

    def cv_plain_mean(self, t, x):
        return None
