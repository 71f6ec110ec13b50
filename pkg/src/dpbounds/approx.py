"""Input approximations: basis fits and the providers they induce.

An input approximation writes the solution one step ahead as a linear
combination of basis functions of (previous state, innovation).  The only
structural requirement on a basis is that its one-step *weighted* expectation

    R_j^k(x) = E[ beta_{j+1} eta^k_{j+1}(x, B_{j+1}) ]

is available in closed form; then the conditional expectation of the weighted
approximation is closed form too, which yields an explicit control (Fenchel
maximizer at that vector) and an explicit martingale (weighted approximation
minus its one-step expectation).  Those two providers, plugged into the
pathwise recursions, are the level-0 upper and lower bounds.

Coefficients come from either a single-regression ("regress later") backward
least-squares fit, or from direct minimization of the empirical upper bound
with a standard-deviation penalty over basis-spanned martingales.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .core import (
    DynamicProgramSpec,
    MarkovModel,
    NumericEvaluationError,
    PathBatch,
    simulate_paths,
)
from .pathwise import theta_lower_kernel, theta_upper_kernel
from .streams import SeededStreamFactory, innovation_block

logger = logging.getLogger(__name__)

__all__ = [
    "BasisSet",
    "InputApproximation",
    "InputProviders",
    "MinimizationResult",
    "fit_lsmc",
    "fit_martingale_minimization",
    "build_input_providers",
    "indicator_basis",
]


@dataclass(frozen=True)
class BasisSet:
    """K basis functions of (previous state, innovation) with closed-form
    one-step weighted expectations.

    eval(j, x_prev, b, x_next=None) -> (..., K)   values of eta_j
    one_step(j, x) -> (..., D, K)                 E[beta_{j+1} eta_{j+1}(x, B)]
    plain_one_step(j, x) -> (..., K), optional    E[eta_{j+1}(x, B)] when no
                                                  weight component is constant
    """

    size: int
    eval: Callable
    one_step: Callable
    plain_one_step: Callable | None = None
    label: str = "custom"


@dataclass
class InputApproximation:
    """Linear-combination approximation of the one-step-ahead solution.

    ``coefficients`` is (J, K) for per-time fits (row j-1 holds a_j) or (K,)
    for a single global vector from the minimization method.
    """

    mode: str
    horizon: int
    basis: BasisSet
    coefficients: np.ndarray
    seed: int | None = None
    gamma: float | None = None

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if not np.all(np.isfinite(self.coefficients)):
            raise ValueError("approximation coefficients must be finite")
        if self.coefficients.ndim == 2 and self.coefficients.shape[0] != self.horizon:
            raise ValueError("per-time coefficients need one row per step")

    def coeff(self, j: int) -> np.ndarray:
        """Coefficient vector a_j, j in 1..J."""
        c = self.coefficients
        return c if c.ndim == 1 else c[j - 1]

    def value(self, j: int, x_prev, b, x_next=None) -> np.ndarray:
        """Approximate solution value at time j along (x_prev, b)."""
        return self.basis.eval(j, x_prev, b, x_next) @ self.coeff(j)

    def cond_weighted(self, t: int, x) -> np.ndarray:
        """Closed-form E_t[beta_{t+1} * value_{t+1}], shape (..., D)."""
        return self.basis.one_step(t, x) @ self.coeff(t + 1)

    def cond_plain(self, t: int, x, model: MarkovModel) -> np.ndarray | None:
        """Closed-form E_t[value_{t+1}] when available, else None."""
        cwi = model.constant_weight_index
        if cwi is not None:
            return self.cond_weighted(t, x)[..., cwi]
        if self.basis.plain_one_step is not None:
            return self.basis.plain_one_step(t, x) @ self.coeff(t + 1)
        return None

    # -- serialization ------------------------------------------------------ #
    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "K": int(self.basis.size),
            "J": int(self.horizon),
            "coefficients": self.coefficients.tolist(),
            "basis": self.basis.label,
            "seed": self.seed,
            "gamma": self.gamma,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)

    @classmethod
    def from_json_dict(cls, d: dict, basis: BasisSet) -> "InputApproximation":
        if d["basis"] != basis.label:
            raise ValueError(f"fitted basis {d['basis']!r} does not match {basis.label!r}")
        if d["K"] != basis.size:
            raise ValueError("basis size mismatch")
        return cls(mode=d["mode"], horizon=int(d["J"]), basis=basis,
                   coefficients=np.asarray(d["coefficients"], dtype=float),
                   seed=d.get("seed"), gamma=d.get("gamma"))


# --------------------------------------------------------------------------- #
# providers induced by an approximation
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class _ApproxDoobMartingale:
    approx: InputApproximation
    model: MarkovModel
    closed_form: bool = True

    def increments(self, j: int, paths: PathBatch) -> np.ndarray:
        b = paths.innovations[:, j]
        y_next = self.approx.value(j + 1, paths.states[:, j], b, paths.states[:, j + 1])
        beta = self.model.weights(b)
        return beta * y_next[:, None] - self.approx.cond_weighted(j, paths.states[:, j])


@dataclass(frozen=True)
class _ApproxControl:
    approx: InputApproximation
    dp: DynamicProgramSpec

    def control(self, j: int, paths: PathBatch) -> np.ndarray:
        z = self.approx.cond_weighted(j, paths.states[:, j])
        return np.asarray(self.dp.maximizer(j, paths.states[:, j], z))

    def conjugate_at(self, j: int, paths: PathBatch) -> np.ndarray:
        u = self.control(j, paths)
        return np.asarray(self.dp.conjugate_value(j, paths.states[:, j], u), dtype=float)


@dataclass
class InputProviders:
    """Everything the nested estimators need from an input approximation:
    the explicit control and martingale, closed-form level-0 evaluators, and
    the control-variate hooks (exact one-step means of the approximation)."""

    dp: DynamicProgramSpec
    model: MarkovModel
    approx: InputApproximation
    control: _ApproxControl
    martingale: _ApproxDoobMartingale

    def theta_up(self, paths: PathBatch, t0: int = 0) -> np.ndarray:
        return theta_upper_kernel(self.dp, self.model, paths,
                                  lambda t: self.martingale.increments(t, paths), t0)

    def theta_low(self, paths: PathBatch, t0: int = 0) -> np.ndarray:
        return theta_lower_kernel(
            self.dp, self.model, paths,
            lambda t: (self.control.control(t, paths), self.control.conjugate_at(t, paths)),
            lambda t: self.martingale.increments(t, paths), t0)

    # -- control variate hooks ---------------------------------------------- #
    def cv_value(self, j: int, x_prev, b, x_next=None):
        return self.approx.value(j, x_prev, b, x_next)

    def cv_weighted_mean(self, t: int, x):
        return self.approx.cond_weighted(t, x)

    def cv_plain_mean(self, t: int, x):
        return self.approx.cond_plain(t, x, self.model)


def build_input_providers(approx: InputApproximation, dp: DynamicProgramSpec,
                          model: MarkovModel) -> InputProviders:
    """Turn a fitted approximation into (control, martingale, evaluators)."""
    return InputProviders(
        dp=dp, model=model, approx=approx,
        control=_ApproxControl(approx=approx, dp=dp),
        martingale=_ApproxDoobMartingale(approx=approx, model=model))


# --------------------------------------------------------------------------- #
# least-squares fit (single-regression backward induction)
# --------------------------------------------------------------------------- #
def fit_lsmc(dp: DynamicProgramSpec, model: MarkovModel, basis: BasisSet,
             n_paths: int, factory: SeededStreamFactory,
             rcond: float = 1e-10) -> InputApproximation:
    """Backward least-squares fit with one regression per time step.

    At the horizon the terminal payoff is projected on the basis; earlier
    steps regress the generator evaluated at the closed-form one-step
    expectation of the already-fitted next-step approximation.  Because the
    regressand is built from the *fitted* next step, no weighted response
    ever enters a regression.  Normal equations are solved in the minimum-norm
    sense via SVD with relative tolerance ``rcond``; rank deficiency is
    logged, not fatal.
    """
    if n_paths < basis.size:
        raise ValueError("need at least as many regression paths as basis functions")
    J, K = dp.horizon, basis.size
    rng = factory.stream("regression")
    paths = simulate_paths(model, innovation_block(model, rng, 1, J, (n_paths,)))

    coeffs = np.empty((J, K))

    def _regress(j: int, target: np.ndarray) -> np.ndarray:
        design = np.asarray(basis.eval(j, paths.states[:, j - 1],
                                       paths.innovations[:, j - 1], paths.states[:, j]))
        sol, _, rank, _ = np.linalg.lstsq(design, target, rcond=rcond)
        if rank < K:
            logger.warning("regression at step %d is rank deficient (rank %d < %d); "
                           "minimum-norm solution used", j, rank, K)
        return sol

    target = np.asarray(dp.terminal(paths.states[:, J]), dtype=float)
    coeffs[J - 1] = _regress(J, target)
    for j in range(J - 1, 0, -1):
        z = basis.one_step(j, paths.states[:, j]) @ coeffs[j]
        target = np.asarray(dp.generator(j, paths.states[:, j], z), dtype=float)
        if not np.all(np.isfinite(target)):
            bad = int(np.flatnonzero(~np.isfinite(target))[0])
            raise NumericEvaluationError(
                f"regression target non-finite at step {j}, path {bad}",
                time_index=j, where=bad)
        coeffs[j - 1] = _regress(j, target)

    return InputApproximation(mode="lsmc", horizon=J, basis=basis,
                              coefficients=coeffs, seed=factory.base_seed)


# --------------------------------------------------------------------------- #
# direct martingale minimization
# --------------------------------------------------------------------------- #
@dataclass
class MinimizationResult:
    approx: InputApproximation
    gamma: float
    converged: bool
    candidates: list = field(default_factory=list)  # (gamma, a, train_obj, test_obj, ok)


def _basis_martingale_increments(model: MarkovModel, basis: BasisSet,
                                 paths: PathBatch) -> np.ndarray:
    """Increments of the K basis martingales along paths, shape (n, J, D, K)."""
    n, J = paths.n_paths, paths.horizon
    out = np.empty((n, J, model.weight_dim, basis.size))
    for t in range(J):
        b = paths.innovations[:, t]
        eta = np.asarray(basis.eval(t + 1, paths.states[:, t], b, paths.states[:, t + 1]))
        beta = model.weights(b)
        out[:, t] = beta[:, :, None] * eta[:, None, :] - basis.one_step(t, paths.states[:, t])
    return out


def _penalized_upper(dp, model, paths, increments, a, gamma) -> float:
    dm = increments @ a
    theta = theta_upper_kernel(dp, model, paths, lambda t: dm[:, t])
    root = theta[:, 0]
    return float(root.mean() + gamma * root.std(ddof=1))


def fit_martingale_minimization(dp: DynamicProgramSpec, model: MarkovModel,
                                basis: BasisSet, n_minimize: int, n_test: int,
                                gammas, factory: SeededStreamFactory,
                                start=None, max_evals: int | None = None,
                                ) -> MinimizationResult:
    """Choose global coefficients by minimizing the penalized empirical upper bound.

    For each penalty gamma the objective (mean plus gamma times sample sd of
    the upper recursion root over frozen minimization paths) is minimized with
    a Nelder-Mead simplex: initial edge max(0.1, 0.1|a0_i|) per coordinate,
    standard reflection/expansion/contraction coefficients, convergence when
    the objective spread falls below 1e-6, at most ``max_evals`` (default
    500 K) evaluations.  Candidates are then scored on fresh test paths with
    their own gamma and the best one is returned.

    Paths are frozen across candidate coefficients (common random numbers),
    so each per-gamma objective is a deterministic function.
    """
    gammas = [float(g) for g in gammas]
    if not gammas or any(g < 0 for g in gammas):
        raise ValueError("gamma grid must be nonempty with nonnegative entries")
    if n_minimize < 2 or n_test < 2:
        raise ValueError("need at least 2 minimization and test paths")
    K = basis.size
    max_evals = 500 * K if max_evals is None else max_evals

    rng_min = factory.stream("minimization")
    rng_test = factory.stream("testing")
    paths_min = simulate_paths(model, innovation_block(model, rng_min, 1, dp.horizon,
                                                       (n_minimize,)))
    paths_test = simulate_paths(model, innovation_block(model, rng_test, 1, dp.horizon,
                                                        (n_test,)))
    inc_min = _basis_martingale_increments(model, basis, paths_min)
    inc_test = _basis_martingale_increments(model, basis, paths_test)

    a0 = np.zeros(K) if start is None else np.asarray(start, dtype=float)
    edges = np.maximum(0.1, 0.1 * np.abs(a0))
    simplex = np.vstack([a0] + [a0 + edges[i] * np.eye(K)[i] for i in range(K)])

    candidates = []
    for gamma in gammas:
        res = minimize(
            lambda a: _penalized_upper(dp, model, paths_min, inc_min, a, gamma),
            a0, method="Nelder-Mead",
            options={"initial_simplex": simplex, "fatol": 1e-6, "xatol": np.inf,
                     "maxfev": max_evals, "maxiter": max_evals})
        test_obj = _penalized_upper(dp, model, paths_test, inc_test, res.x, gamma)
        candidates.append((gamma, res.x.copy(), float(res.fun), test_obj, bool(res.success)))

    best = min(range(len(candidates)), key=lambda i: candidates[i][3])
    gamma_best, a_best, _, _, ok = candidates[best]
    approx = InputApproximation(mode="minimization", horizon=dp.horizon, basis=basis,
                                coefficients=a_best, seed=factory.base_seed,
                                gamma=gamma_best)
    return MinimizationResult(approx=approx, gamma=gamma_best, converged=ok,
                              candidates=candidates)


# --------------------------------------------------------------------------- #
# indicator basis on a finite-support model (oracle-scale only)
# --------------------------------------------------------------------------- #
def indicator_basis(model, decimals: int = 12) -> BasisSet:
    """One indicator per reachable (time, state) node of a finite-support model.

    Exact one-step expectations come from enumerating the atoms, so a fit on
    this basis can represent the solution exactly.  Intended for small trees.
    """
    from .enumeration import SupportEnumeration

    enum = SupportEnumeration.build(model)
    J = model.horizon
    catalog: list[tuple[int, bytes]] = []
    keys_per_time: list[dict] = [dict() for _ in range(J + 1)]
    for t in range(1, J + 1):
        states = np.round(enum.paths.states[:, t], decimals)
        for row in states:
            key = row.tobytes()
            if key not in keys_per_time[t]:
                keys_per_time[t][key] = len(catalog)
                catalog.append((t, key))
    K = len(catalog)

    def eval_fn(j, x_prev, b, x_next=None):
        if x_next is None:
            x_next = model.step(j, np.asarray(x_prev), np.asarray(b))
        states = np.atleast_2d(np.round(np.asarray(x_next), decimals))
        out = np.zeros(states.shape[:-1] + (K,))
        lookup = keys_per_time[j]
        for i, row in enumerate(states):
            k = lookup.get(row.tobytes())
            if k is not None:
                out[i, k] = 1.0
        return out

    def one_step(t, x):
        x = np.atleast_2d(np.asarray(x))
        atoms = model.support[t]
        probs = model.probabilities[t]
        out = np.zeros(x.shape[:-1] + (model.weight_dim, K))
        for i, (atom, prob) in enumerate(zip(atoms, probs)):
            nxt = np.asarray(model.step(t + 1, x, np.broadcast_to(atom, x.shape[:-1] + atom.shape)))
            eta = eval_fn(t + 1, x, None, nxt)
            beta = model.weights(atom)
            out += prob * beta[None, :, None] * eta[:, None, :]
        return out

    return BasisSet(size=K, eval=eval_fn, one_step=one_step, label="indicator")
