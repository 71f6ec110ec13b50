"""Pathwise recursions against the exact finite-support oracle."""
from __future__ import annotations

import numpy as np
import pytest

from dpbounds.core import (
    DynamicProgramSpec,
    InadmissibleControlError,
    StructureError,
    simulate_paths,
    solve_exact,
)
from dpbounds.enumeration import SupportEnumeration, tree_to_leaf_values
from dpbounds.pathwise import (
    ConstantControl,
    ExactControl,
    PrecomputedMartingale,
    ZeroMartingale,
    exact_doob,
    lower_pathwise,
    upper_pathwise,
)
from dpbounds.stopping import StoppingParams, binomial_preset, stopping_model


@pytest.fixture(scope="module")
def binomial():
    dp, model = stopping_model(binomial_preset(horizon=2))
    tree = solve_exact(dp, model)
    enum = SupportEnumeration.build(model)
    return dp, model, tree, enum


def test_exact_doob_increment_values(binomial):
    dp, model, tree, enum = binomial
    doob = exact_doob(dp, model, tree)
    inc0 = doob.increments(0, enum.paths)[:, 0]
    # up move: 2.5 - 1.5625, down move: 0.625 - 1.5625
    assert inc0 == pytest.approx([0.9375, 0.9375, -0.9375, -0.9375], abs=1e-12)


def test_doob_increments_have_zero_conditional_mean(binomial):
    dp, model, tree, enum = binomial
    doob = exact_doob(dp, model, tree)
    for t in range(dp.horizon):
        inc = doob.increments(t, enum.paths)
        cond = enum.cond_exp(inc, t)
        assert np.allclose(cond, 0.0, atol=1e-12)


def test_upper_recursion_with_exact_doob_is_pathwise_optimal(binomial):
    dp, model, tree, enum = binomial
    y = tree_to_leaf_values(tree, enum)
    theta = upper_pathwise(dp, model, enum.paths, exact_doob(dp, model, tree))
    assert np.allclose(theta, y, atol=1e-12)


def test_lower_recursion_with_optimal_pair_is_perfect_variate(binomial):
    dp, model, tree, enum = binomial
    y = tree_to_leaf_values(tree, enum)
    control = ExactControl(dp, model, tree)
    theta = lower_pathwise(dp, model, enum.paths, control, exact_doob(dp, model, tree))
    assert np.allclose(theta, y, atol=1e-12)


def test_zero_martingale_upper_mean_dominates_root(binomial):
    dp, model, tree, enum = binomial
    theta = upper_pathwise(dp, model, enum.paths, ZeroMartingale(dp.weight_dim))
    # pathwise the recursion folds to the running maximum of the reward
    assert theta[:, 0] == pytest.approx([4.0, 2.0, 1.0, 1.0], abs=1e-12)
    mean = enum.expectation(theta[:, 0])
    assert mean == pytest.approx(2.0, abs=1e-12)
    assert mean >= tree.root_value


def test_lower_mean_is_independent_of_the_martingale(binomial):
    dp, model, tree, enum = binomial
    control = ExactControl(dp, model, tree)
    with_doob = lower_pathwise(dp, model, enum.paths, control,
                               exact_doob(dp, model, tree))
    with_zero = lower_pathwise(dp, model, enum.paths, control,
                               ZeroMartingale(dp.weight_dim))
    assert enum.expectation(with_doob[:, 0]) == pytest.approx(
        enum.expectation(with_zero[:, 0]), abs=1e-10)
    assert enum.expectation(with_zero[:, 0]) == pytest.approx(tree.root_value,
                                                              abs=1e-10)


def test_linear_generator_constant_terminal_is_flat():
    horizon = 3
    params = StoppingParams(
        horizon=horizon, x0=1.0,
        multipliers=tuple((2.0, 0.5) for _ in range(horizon)),
        probabilities=tuple((0.5, 0.5) for _ in range(horizon)))
    _, model = stopping_model(params)
    dp = DynamicProgramSpec(
        horizon=horizon, weight_dim=1,
        generator=lambda j, x, z: np.asarray(z)[..., 0],
        conjugate_value=lambda j, x, u: np.where(
            np.abs(np.asarray(u)[..., 0] - 1.0) <= 1e-12, 0.0, np.inf),
        maximizer=lambda j, x, z: np.ones(np.asarray(z).shape),
        terminal=lambda x: np.full(np.asarray(x).shape[:-1], 5.0))
    enum = SupportEnumeration.build(model)
    zero = ZeroMartingale(1)
    assert np.allclose(upper_pathwise(dp, model, enum.paths, zero), 5.0, atol=1e-12)
    low = lower_pathwise(dp, model, enum.paths,
                         ConstantControl(np.array([1.0])), zero)
    assert np.allclose(low, 5.0, atol=1e-12)


def test_dual_ordering_for_random_controls_and_martingales():
    # for any admissible control and any martingale the enumerated means
    # bracket the exact solution
    rng = np.random.default_rng(42)
    for trial in range(20):
        horizon = int(rng.integers(2, 5))
        n_atoms = int(rng.integers(2, 4))
        mult = tuple(tuple(np.exp(rng.normal(0, 0.5, n_atoms))) for _ in range(horizon))
        raw = rng.random((horizon, n_atoms)) + 0.1
        probs = tuple(tuple(row / row.sum()) for row in raw)
        params = StoppingParams(horizon=horizon, x0=1.0, multipliers=mult,
                                probabilities=probs)
        dp, model = stopping_model(params)
        tree = solve_exact(dp, model)
        enum = SupportEnumeration.build(model)

        # random stop/continue control (admissible: conjugate finite on [0,1])
        rand_controls = rng.integers(0, 2, (enum.n_leaves, horizon)).astype(float)

        class RandomControl:
            def control(self, j, paths):
                return rand_controls[:, j][:, None]

            def conjugate_at(self, j, paths):
                u = rand_controls[:, j]
                s = paths.states[:, j, 0]
                return -s * (1.0 - u)

        # Doob martingale of a random adapted process (mean-zero by build)
        h = rng.normal(0, 1, (enum.n_leaves, horizon + 1))
        increments = np.empty((enum.n_leaves, horizon, 1))
        for t in range(horizon):
            ht = enum.cond_exp(h[:, t + 1], t + 1)
            weighted = enum.weights(t)[:, 0] * ht
            increments[:, t, 0] = weighted - enum.cond_exp(weighted, t)
        mart = PrecomputedMartingale(increments)

        up = upper_pathwise(dp, model, enum.paths, mart)
        low = lower_pathwise(dp, model, enum.paths, RandomControl(), mart)
        assert enum.expectation(low[:, 0]) <= tree.root_value + 1e-10
        assert enum.expectation(up[:, 0]) >= tree.root_value - 1e-10


def test_inadmissible_control_raises_with_time_index(binomial):
    dp, model, tree, enum = binomial
    bad = ConstantControl(np.array([2.0]), conjugate=np.inf)
    with pytest.raises(InadmissibleControlError) as err:
        lower_pathwise(dp, model, enum.paths, bad, ZeroMartingale(1))
    assert err.value.time_index == dp.horizon - 1


def test_exact_doob_rejects_foreign_paths(binomial):
    dp, model, tree, enum = binomial
    doob = exact_doob(dp, model, tree)
    foreign = enum.paths.innovations.copy()
    foreign[0, 0, 1] = 3.14159
    with pytest.raises(StructureError):
        doob.increments(0, simulate_paths(model, foreign))
