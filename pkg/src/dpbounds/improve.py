"""Iterative tightening of the pathwise bounds by nested Monte Carlo.

One improvement step rebuilds the dual objects from the current bound: the
upper recursion is re-run with estimated Doob increments of its previous
iterate, and the lower recursion with the Fenchel maximizer at the estimated
weighted conditional expectation of *its* previous iterate.  Conditional
expectations are plain Monte Carlo averages over middle paths that branch off
each outer path at every time step; a second step needs a third (inner) layer
because the previous iterate is then itself a nested estimator.  Simulated
layers are capped at two improvement steps; on finite-support models the
middle layer can instead enumerate the full support, which makes the step an
exact operator that can be iterated to the fixed point.

Estimates are deterministic functions of (seed, configuration): every layer
draws from label-derived streams and outer paths are processed in fixed-size
chunks whose reductions do not depend on the chunk schedule.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import (
    DynamicProgramSpec,
    FiniteSupportModel,
    MarkovModel,
    PathBatch,
    simulate_paths,
)
from .enumeration import SupportEnumeration, improve_lower_exact, improve_upper_exact
from .pathwise import theta_lower_kernel, theta_upper_kernel
from .streams import PathBundle, SeededStreamFactory, generate_bundle

logger = logging.getLogger(__name__)

__all__ = [
    "NestedEstimatorConfig",
    "improve_upper",
    "improve_lower",
    "estimate_doob_increment",
    "FamilySelector",
    "FamilyImprovement",
    "family_improve",
]

LOWER_MARTINGALES = ("zero", "input", "doob")


@dataclass(frozen=True)
class NestedEstimatorConfig:
    """Path counts and switches of the layered estimator.

    ``n_inner`` is only consumed by the second improvement step.  With
    ``enumerate_middle`` (finite-support models only) the middle layer is the
    full support with exact probabilities.  ``chunk_size`` fixes how many
    outer paths are processed per vectorized block; results are independent
    of it.
    """

    n_outer: int
    n_middle: int
    n_inner: int = 0
    use_control_variates: bool = True
    seed: int = 0
    enumerate_middle: bool = False
    chunk_size: int = 128

    def __post_init__(self):
        if self.n_outer < 1 or self.n_middle < 1 or self.n_inner < 0:
            raise ValueError("path counts must be >= 1 (n_inner may be 0)")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")


# --------------------------------------------------------------------------- #
# middle-layer statistics
# --------------------------------------------------------------------------- #
def _cv_hooks(inputs, cfg_flag: bool, model: MarkovModel):
    """Resolve the control-variate hooks, honouring availability."""
    if not cfg_flag:
        return False, False
    weighted_ok = getattr(inputs, "cv_weighted_mean", None) is not None \
        and inputs.cv_weighted_mean(0, model.x0[None, :]) is not None
    plain_ok = weighted_ok and inputs.cv_plain_mean(0, model.x0[None, :]) is not None
    if not weighted_ok:
        logger.warning("control variates requested but the input approximation "
                       "exposes no closed-form one-step means; disabled")
    elif not plain_ok:
        logger.warning("no constant weight component: control variate disabled "
                       "for the unweighted conditional expectations")
    return weighted_ok, plain_ok


def _switched_batch(model: MarkovModel, parent: PathBatch, t: int,
                    innov: np.ndarray) -> PathBatch:
    """Paths that follow each parent through time t and branch afterwards.

    ``innov`` has shape (n, S, J - t, innovation_dim); the result has n * S
    rows ordered parent-major.
    """
    n, S = innov.shape[0], innov.shape[1]
    J = parent.horizon
    full_innov = np.repeat(parent.innovations[:, None, :, :], S, axis=1) \
        .reshape(n * S, J, parent.innovations.shape[-1]).copy()
    full_innov[:, t:] = innov.reshape(n * S, J - t, -1)
    full_states = np.empty((n * S, J + 1, parent.states.shape[-1]))
    full_states[:, :t + 1] = np.repeat(parent.states[:, None, :t + 1, :], S, axis=1) \
        .reshape(n * S, t + 1, -1)
    for s in range(t, J):
        full_states[:, s + 1] = model.step(s + 1, full_states[:, s], full_innov[:, s])
    return PathBatch(states=full_states, innovations=full_innov)


def _middle_stats(dp: DynamicProgramSpec, model: MarkovModel, inputs,
                  parent: PathBatch, theta_fn, family_fn, t_start: int,
                  need_plain: bool, cv_weighted: bool, cv_plain: bool,
                  t_list=None):
    """Per-branch-time middle averages along each parent path.

    Returns (weighted, plain): ``weighted[:, t]`` estimates the conditional
    expectation at t of the weighted theta value at t+1 and ``plain[:, t]``
    the conditional expectation at t of theta_t (for t >= 1).  ``family_fn(t)``
    yields (innovations (n, S, J-t, dD), probabilities or None).
    """
    n = parent.n_paths
    J = dp.horizon
    D = dp.weight_dim
    weighted = np.zeros((n, J, D))
    plain = np.zeros((n, J)) if need_plain else None
    for t in (range(t_start, J) if t_list is None else t_list):
        innov, probs = family_fn(t)
        S = innov.shape[1]
        sw = _switched_batch(model, parent, t, innov)
        try:
            theta = theta_fn(sw, t)
        except Exception as exc:
            raise RuntimeError(
                f"theta evaluation failed on the middle layer at branch {t}") from exc
        beta = model.weights(sw.innovations[:, t]).reshape(n, S, D)
        th_next = theta[:, t + 1].reshape(n, S)
        w_samples = beta * th_next[..., None]
        if cv_weighted:
            proxy = inputs.cv_value(t + 1, sw.states[:, t], sw.innovations[:, t],
                                    sw.states[:, t + 1]).reshape(n, S)
            w_samples = w_samples - beta * proxy[..., None]
        if probs is None:
            weighted[:, t] = w_samples.mean(axis=1)
        else:
            weighted[:, t] = np.einsum("nsd,s->nd", w_samples, probs)
        if cv_weighted:
            weighted[:, t] += inputs.cv_weighted_mean(t, parent.states[:, t])
        if need_plain and t >= 1:
            p_samples = theta[:, t].reshape(n, S)
            if cv_plain:
                proxy = inputs.cv_value(t + 1, sw.states[:, t], sw.innovations[:, t],
                                        sw.states[:, t + 1]).reshape(n, S)
                p_samples = p_samples - proxy
            plain[:, t] = p_samples.mean(axis=1) if probs is None \
                else p_samples @ probs
            if cv_plain:
                plain[:, t] += inputs.cv_plain_mean(t, parent.states[:, t])
    return weighted, plain


def _doob_from_stats(dp: DynamicProgramSpec, model: MarkovModel, parent: PathBatch,
                     weighted: np.ndarray, plain, t_start: int) -> np.ndarray:
    """Assemble Doob-style increments from middle statistics."""
    n, J = parent.n_paths, dp.horizon
    dm = np.zeros((n, J, dp.weight_dim))
    terminal = np.asarray(dp.terminal(parent.states[:, J]), dtype=float)
    for t in range(t_start, J):
        beta = model.weights(parent.innovations[:, t])
        plain_next = terminal if t + 1 == J else plain[:, t + 1]
        dm[:, t] = beta * plain_next[:, None] - weighted[:, t]
    return dm


def _middle_family(bundle: PathBundle, side: str, outer_ids) -> callable:
    def family_fn(t):
        innov = np.stack([bundle.middle_innovations(side, int(i), t) for i in outer_ids])
        return innov, None
    return family_fn


def _inner_family(bundle: PathBundle, side: str, outer_ids, s: int) -> callable:
    def family_fn(t):
        blocks = [bundle.inner_innovations(side, int(i), s, t) for i in outer_ids]
        innov = np.concatenate(blocks, axis=0)  # (c * n_middle, n_inner, J-t, dD)
        return innov, None
    return family_fn


# --------------------------------------------------------------------------- #
# improvement drivers
# --------------------------------------------------------------------------- #
def _chunks(total: int, size: int):
    for start in range(0, total, size):
        yield start, min(start + size, total)


def _enumeration_route(dp, model, inputs, cfg, k, side: str,
                       lower_martingale: str = "doob") -> np.ndarray:
    enum = SupportEnumeration.build(model)
    theta = inputs.theta_up(enum.paths) if side == "up" else inputs.theta_low(enum.paths)
    for _ in range(k):
        theta = improve_upper_exact(dp, enum, theta) if side == "up" \
            else improve_lower_exact(dp, enum, theta, martingale=lower_martingale)
    return theta[:, 0]


def improve_upper(dp: DynamicProgramSpec, model: MarkovModel, inputs,
                  cfg: NestedEstimatorConfig, k: int,
                  factory: SeededStreamFactory | None = None) -> np.ndarray:
    """Per-outer-path root values of the k-times improved upper recursion.

    k = 0 evaluates the input bound itself.  Monte Carlo improvement supports
    k in {1, 2}; with ``cfg.enumerate_middle`` on a finite-support model any
    k is allowed and the step is exact.
    """
    if cfg.enumerate_middle:
        if not isinstance(model, FiniteSupportModel):
            raise ValueError("enumerate_middle requires a finite-support model")
        return _enumeration_route(dp, model, inputs, cfg, k, "up")
    if k not in (0, 1, 2):
        raise ValueError("simulated improvement supports k in {0, 1, 2}")
    if k == 2 and cfg.n_inner < 1:
        raise ValueError("second improvement step needs n_inner >= 1")

    factory = factory or SeededStreamFactory(cfg.seed)
    bundle = generate_bundle(model, cfg, factory)
    outer_all = bundle.outer_innovations()
    cv_w, cv_p = _cv_hooks(inputs, cfg.use_control_variates, model)
    out = np.empty(cfg.n_outer)
    chunk = cfg.chunk_size if k < 2 else max(1, cfg.chunk_size // 8)
    for start, stop in _chunks(cfg.n_outer, chunk):
        ids = range(start, stop)
        outer = simulate_paths(model, outer_all[start:stop])
        if k == 0:
            out[start:stop] = inputs.theta_up(outer)[:, 0]
            continue
        if k == 1:
            theta_fn = lambda sw, t: inputs.theta_up(sw, t)
        else:
            def theta_fn(sw_mid, s):
                fam = _inner_family(bundle, "up", ids, s)
                w1, p1 = _middle_stats(dp, model, inputs, sw_mid,
                                       lambda p, t: inputs.theta_up(p, t),
                                       fam, s, True, cv_w, cv_p)
                dm1 = _doob_from_stats(dp, model, sw_mid, w1, p1, s)
                return theta_upper_kernel(dp, model, sw_mid, lambda t: dm1[:, t], s)
        w, p = _middle_stats(dp, model, inputs, outer, theta_fn,
                             _middle_family(bundle, "up", ids), 0, True, cv_w, cv_p)
        dm = _doob_from_stats(dp, model, outer, w, p, 0)
        out[start:stop] = theta_upper_kernel(dp, model, outer, lambda t: dm[:, t])[:, 0]
    return out


def improve_lower(dp: DynamicProgramSpec, model: MarkovModel, inputs,
                  cfg: NestedEstimatorConfig, k: int,
                  factory: SeededStreamFactory | None = None,
                  martingale: str = "zero") -> np.ndarray:
    """Per-outer-path root values of the k-times improved lower recursion.

    The new control at each time is the Fenchel maximizer at the estimated
    weighted conditional expectation of the previous iterate.  The martingale
    in the new recursion does not move the mean; options are "zero" (none),
    "input" (the closed-form input martingale, cheap variance reduction) and
    "doob" (estimated Doob increments of the previous iterate, tightest).
    """
    if martingale not in LOWER_MARTINGALES:
        raise ValueError(f"martingale must be one of {LOWER_MARTINGALES}")
    if cfg.enumerate_middle:
        if not isinstance(model, FiniteSupportModel):
            raise ValueError("enumerate_middle requires a finite-support model")
        return _enumeration_route(dp, model, inputs, cfg, k, "low",
                                  "doob" if martingale == "doob" else "zero")
    if k not in (0, 1, 2):
        raise ValueError("simulated improvement supports k in {0, 1, 2}")
    if k == 2 and cfg.n_inner < 1:
        raise ValueError("second improvement step needs n_inner >= 1")

    factory = factory or SeededStreamFactory(cfg.seed)
    bundle = generate_bundle(model, cfg, factory)
    outer_all = bundle.outer_innovations()
    cv_w, cv_p = _cv_hooks(inputs, cfg.use_control_variates, model)
    need_plain = martingale == "doob"
    out = np.empty(cfg.n_outer)
    chunk = cfg.chunk_size if k < 2 else max(1, cfg.chunk_size // 8)
    for start, stop in _chunks(cfg.n_outer, chunk):
        ids = range(start, stop)
        outer = simulate_paths(model, outer_all[start:stop])
        if k == 0:
            out[start:stop] = inputs.theta_low(outer)[:, 0]
            continue
        if k == 1:
            theta_fn = lambda sw, t: inputs.theta_low(sw, t)
        else:
            def theta_fn(sw_mid, s):
                fam = _inner_family(bundle, "low", ids, s)
                w1, p1 = _middle_stats(dp, model, inputs, sw_mid,
                                       lambda p, t: inputs.theta_low(p, t),
                                       fam, s, need_plain, cv_w, cv_p)
                return _lower_theta_from_stats(dp, model, inputs, sw_mid, w1, p1,
                                               martingale, s)
        w, p = _middle_stats(dp, model, inputs, outer, theta_fn,
                             _middle_family(bundle, "low", ids), 0, need_plain,
                             cv_w, cv_p)
        out[start:stop] = _lower_theta_from_stats(dp, model, inputs, outer, w, p,
                                                  martingale, 0)[:, 0]
    return out


def _lower_theta_from_stats(dp, model, inputs, parent, weighted, plain,
                            martingale: str, t0: int) -> np.ndarray:
    """Lower recursion with maximizer controls at the estimated expectations."""
    if martingale == "doob":
        dm = _doob_from_stats(dp, model, parent, weighted, plain, t0)
        increments_fn = lambda t: dm[:, t]
    elif martingale == "input":
        increments_fn = lambda t: inputs.martingale.increments(t, parent)
    else:
        zeros = np.zeros((parent.n_paths, dp.weight_dim))
        increments_fn = lambda t: zeros

    def control_fn(t):
        r = np.asarray(dp.maximizer(t, parent.states[:, t], weighted[:, t]))
        fstar = np.asarray(dp.conjugate_value(t, parent.states[:, t], r), dtype=float)
        return r, fstar

    return theta_lower_kernel(dp, model, parent, control_fn, increments_fn, t0)


# --------------------------------------------------------------------------- #
# single-increment estimator (the elementary nested operation)
# --------------------------------------------------------------------------- #
def estimate_doob_increment(dp: DynamicProgramSpec, model: MarkovModel, j: int,
                            prefix: PathBatch, theta_fn, cfg: NestedEstimatorConfig,
                            factory: SeededStreamFactory | None = None,
                            inputs=None, side: str = "up") -> np.ndarray:
    """Estimated Doob increment for the step j -> j+1 along given path prefixes.

    Two middle families are used per prefix: one branching at j+1 for the
    weighted term, one branching at j+2 for the plain term (at the horizon
    the plain term is the terminal value, evaluated exactly).  With
    ``cfg.enumerate_middle`` the families enumerate the remaining support.
    Control variates subtract the input approximation along the middle paths
    and add back its closed-form conditional expectation.
    """
    if not 0 <= j < dp.horizon:
        raise ValueError(f"j must lie in 0..{dp.horizon - 1}")
    factory = factory or SeededStreamFactory(cfg.seed)
    bundle = generate_bundle(model, cfg, factory)
    cv_flag = cfg.use_control_variates and inputs is not None
    cv_w, cv_p = _cv_hooks(inputs, cv_flag, model) if inputs is not None else (False, False)

    if cfg.enumerate_middle:
        if not isinstance(model, FiniteSupportModel):
            raise ValueError("enumerate_middle requires a finite-support model")
        family_fn = _enumerated_family(model, prefix.n_paths)
    else:
        ids = range(prefix.n_paths)
        family_fn = _middle_family(bundle, side, ids)

    branch_times = [j] if j + 1 == dp.horizon else [j, j + 1]
    weighted, plain = _middle_stats(dp, model, inputs, prefix, theta_fn, family_fn,
                                    j, True, cv_w, cv_p, t_list=branch_times)
    dm = _doob_from_stats(dp, model, prefix, weighted, plain, j)
    return dm[:, j]


def _enumerated_family(model: FiniteSupportModel, n_paths: int):
    from itertools import product

    def family_fn(t):
        sizes = model.support_sizes()[t:]
        total = int(np.prod(sizes))
        steps = model.horizon - t
        innov = np.empty((total, steps, model.innovation_dim))
        probs = np.ones(total)
        for row, combo in enumerate(product(*[range(s) for s in sizes])):
            for i, atom in enumerate(combo):
                innov[row, i] = model.support[t + i][atom]
                probs[row] *= model.probabilities[t + i][atom]
        innov = np.repeat(innov[None], n_paths, axis=0)
        return innov, probs
    return family_fn


# --------------------------------------------------------------------------- #
# simultaneous improvement of a family of bounds
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class FamilySelector:
    """A finite family of one-sided bounds with per-time candidate windows.

    ``members[l]`` is the leaf-value table (n_leaves, J+1) of the l-th bound
    on an enumerated finite-support model; ``windows[j-1]`` lists the member
    indices eligible at time j (nondecreasing in j).  ``kind`` is "sub" for
    lower bounds (argmax selection) or "super" for upper bounds (argmin).
    """

    members: tuple
    windows: tuple
    kind: str = "sub"

    def __post_init__(self):
        if self.kind not in ("sub", "super"):
            raise ValueError("kind must be 'sub' or 'super'")
        if not self.members:
            raise ValueError("family must be nonempty")
        prev: set = set()
        for j, window in enumerate(self.windows, start=1):
            w = set(window)
            if not w:
                raise ValueError(f"window at time {j} is empty")
            if not prev <= w:
                raise ValueError("windows must be nondecreasing in time")
            if not w <= set(range(len(self.members))):
                raise ValueError("window refers to unknown member index")
            prev = w


@dataclass
class FamilyImprovement:
    values: np.ndarray     # combined bound per (leaf, time)
    selected: np.ndarray   # chosen member index per (leaf, time >= 1)
    root_value: float


def family_improve(selector: FamilySelector, dp: DynamicProgramSpec,
                   model: FiniteSupportModel) -> FamilyImprovement:
    """Switch between family members time by time to dominate all of them.

    At each time j >= 1 the member maximizing (minimizing, for upper bounds)
    the generator at the conditional expectation of its weighted next value
    is selected, ties broken to the lowest index; at the root the generator
    is applied to the combined next-step value.  The switched process is
    itself a bound of the same kind, so one improvement step from it
    dominates every member on its window.
    """
    enum = SupportEnumeration.build(model)
    J = dp.horizon
    if len(selector.windows) != J:
        raise ValueError("need one candidate window per time 1..J")
    members = [np.asarray(m, dtype=float) for m in selector.members]
    n = enum.n_leaves
    values = np.empty((n, J + 1))
    selected = np.empty((n, J), dtype=np.int64)
    pick = np.argmax if selector.kind == "sub" else np.argmin
    for j in range(1, J + 1):
        window = sorted(set(selector.windows[j - 1]))
        beta = enum.weights(j - 1)
        scores = np.stack([
            np.asarray(dp.generator(
                j - 1, enum.paths.states[:, j - 1],
                enum.cond_exp(beta * members[l][:, j, None], j - 1)))
            for l in window])
        choice = pick(scores, axis=0)
        idx = np.asarray(window)[choice]
        selected[:, j - 1] = idx
        values[:, j] = np.take_along_axis(
            np.stack([members[l][:, j] for l in window]), choice[None, :], axis=0)[0]
    beta0 = enum.weights(0)
    root = np.asarray(dp.generator(0, enum.paths.states[:, 0],
                                   enum.cond_exp(beta0 * values[:, 1, None], 0)))
    values[:, 0] = root
    return FamilyImprovement(values=values, selected=selected,
                             root_value=float(root[0]))
