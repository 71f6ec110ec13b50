"""Exact solver, structural checks and the dynamic-program contracts."""
from __future__ import annotations

import numpy as np
import pytest

from dpbounds.core import (
    DynamicProgramSpec,
    FiniteSupportModel,
    StructureError,
    SupportSizeError,
    check_comparison,
    check_monotonicity,
    solve_exact,
)
from dpbounds.stopping import StoppingParams, binomial_preset, stopping_model


def brute_force_stopping_value(x0, steps, multipliers, probs):
    """Independent oracle: direct recursion on (time, state) for the stopping
    problem with reward equal to the state."""
    def value(j, x):
        if j == steps:
            return x
        cont = sum(p * value(j + 1, x * m) for m, p in zip(multipliers, probs))
        return max(x, cont)
    return value(0, x0)


def test_binomial_root_value_matches_brute_force():
    dp, model = stopping_model(binomial_preset(horizon=2))
    tree = solve_exact(dp, model)
    oracle = brute_force_stopping_value(1.0, 2, (2.0, 0.5), (0.5, 0.5))
    assert oracle == pytest.approx(1.5625, abs=0)      # folded by hand as well
    assert tree.root_value == pytest.approx(oracle, abs=1e-12)
    # interior values, folded by hand
    assert tree.value((0,)) == pytest.approx(2.5)
    assert tree.value((1,)) == pytest.approx(0.625)


def test_linear_generator_tower_property():
    # generator f(z) = z_0 with constant weight: the root value equals the
    # constant terminal by the tower property of finite sums
    horizon = 4
    params = StoppingParams(
        horizon=horizon, x0=1.0,
        multipliers=tuple((1.3, 0.8) for _ in range(horizon)),
        probabilities=tuple((0.4, 0.6) for _ in range(horizon)))
    _, model = stopping_model(params)
    dp = DynamicProgramSpec(
        horizon=horizon, weight_dim=1,
        generator=lambda j, x, z: np.asarray(z)[..., 0],
        conjugate_value=lambda j, x, u: np.where(
            np.abs(np.asarray(u)[..., 0] - 1.0) <= 1e-12, 0.0, np.inf),
        maximizer=lambda j, x, z: np.ones(np.asarray(z).shape),
        terminal=lambda x: np.full(np.asarray(x).shape[:-1], 5.0))
    tree = solve_exact(dp, model)
    assert tree.root_value == pytest.approx(5.0, abs=1e-12)


def test_single_step_funding_value_matches_direct_arithmetic():
    # equal rates, one asset, two-point innovation, one step: the value is
    # (1 - R dt) E[g] - (mu - R) dt * sigma^{-1} * E[p_C(dW) g] / dt
    from dpbounds.funding import FundingParams, make_dynamic_program, pack_innovation

    params = FundingParams(lend_rate=0.03, borrow_rate=0.03, drift=0.05,
                           base_vol=0.2, correlation=0.0, n_assets=1, steps=1,
                           maturity=0.25, truncation=0.77, spot=100.0)
    dw = np.array([[0.08], [-0.06]])
    probs = np.array([0.45, 0.55])
    atoms = pack_innovation(params, dw)
    dp = make_dynamic_program(params)

    model = FiniteSupportModel(
        x0=np.array([params.spot]), horizon=1, state_dim=1,
        innovation_dim=params.innovation_dim, weight_dim=params.weight_dim,
        step=lambda j, x, b: np.asarray(x) * np.exp(
            (params.drift - 0.5 * params.base_vol**2) * params.dt
            + params.base_vol * np.asarray(b)[..., 2:3]),
        sample_innovation=None, support=(atoms,), probabilities=(probs,))
    tree = solve_exact(dp, model)

    dt = params.dt
    growth = np.exp((params.drift - 0.5 * params.base_vol**2) * dt
                    + params.base_vol * dw[:, 0])
    payoff = np.maximum(params.spot * growth - params.strike_low, 0.0) \
        - 2.0 * np.maximum(params.spot * growth - params.strike_high, 0.0)
    clipped = np.clip(dw[:, 0], -params.truncation, params.truncation)
    expected = (1.0 - 0.03 * dt) * (probs @ payoff) \
        - (params.drift - 0.03) * dt * (1.0 / params.base_vol) \
        * (probs @ (clipped * payoff)) / dt
    assert tree.root_value == pytest.approx(expected, abs=1e-12)


def test_solve_exact_guards_support_blowup():
    dp, model = stopping_model(binomial_preset(horizon=4))
    with pytest.raises(SupportSizeError):
        solve_exact(dp, model, max_nodes=8)


def test_solve_exact_invariant_under_atom_reordering():
    params = binomial_preset(horizon=3)
    dp, model = stopping_model(params)
    swapped = StoppingParams(
        horizon=3, x0=1.0,
        multipliers=tuple((0.5, 2.0) for _ in range(3)),
        probabilities=tuple((0.5, 0.5) for _ in range(3)))
    dp2, model2 = stopping_model(swapped)
    assert solve_exact(dp, model).root_value == pytest.approx(
        solve_exact(dp2, model2).root_value, abs=1e-12)


def test_check_comparison_examples():
    import copy

    dp, model = stopping_model(binomial_preset())
    tree = solve_exact(dp, model)
    assert check_comparison(tree, tree)

    shifted = copy.deepcopy(tree)
    for node in shifted.nodes.values():
        node.value += 1.0
    assert check_comparison(tree, shifted)          # +1 everywhere still dominates

    root_up = copy.deepcopy(tree)
    root_up.nodes[()].value += 1.0
    assert not check_comparison(root_up, tree)      # lifted root is no lower bound

    broken = copy.deepcopy(tree)
    del broken.nodes[(0, 0)]
    with pytest.raises(StructureError):
        check_comparison(broken, tree)


def test_monotonicity_clean_for_stopping():
    dp, model = stopping_model(binomial_preset(horizon=3))
    rng = np.random.default_rng(0)
    report = check_monotonicity(dp, model, samples=300, rng=rng)
    assert report.ok
    assert report.n_checked == 300
