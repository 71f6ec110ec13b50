"""Stream derivation, inverse-CDF sampling, bundle layout and estimator stats."""
from __future__ import annotations

import numpy as np
import pytest

from dpbounds.stats import BoundEstimate, summarize
from dpbounds.streams import PathBundle, SeededStreamFactory, generate_bundle, standard_normal
from dpbounds.stopping import binomial_preset, stopping_model


def test_identical_labels_identical_stream():
    f = SeededStreamFactory(base_seed=1234)
    a = f.stream("middle-up", 7, 3).random(100)
    b = f.stream("middle-up", 7, 3).random(100)
    assert np.array_equal(a, b)


def test_distinct_labels_pass_correlation_sanity():
    f = SeededStreamFactory(base_seed=99)
    n = 100_000
    pairs = [(("outer",), ("middle-up", 0, 0)),
             (("middle-up", 0, 0), ("middle-up", 0, 1)),
             (("middle-up", 0, 1), ("middle-up", 1, 0)),
             (("inner-up", 5, 2, 3), ("inner-up", 5, 3, 2))]
    for la, lb in pairs:
        x = standard_normal(f.stream(*la), n)
        y = standard_normal(f.stream(*lb), n)
        rho = np.corrcoef(x, y)[0, 1]
        assert abs(rho) < 4.0 / np.sqrt(n)


def test_labels_reject_negative_and_bool():
    f = SeededStreamFactory(base_seed=0)
    with pytest.raises(ValueError):
        f.stream(-1)
    with pytest.raises(TypeError):
        f.stream(True)


def test_inverse_cdf_normals_are_standard():
    rng = SeededStreamFactory(7).stream("x")
    z = standard_normal(rng, 200_000)
    assert np.all(np.isfinite(z))
    assert abs(z.mean()) < 4.0 / np.sqrt(z.size)
    assert abs(z.std() - 1.0) < 0.01


def test_bundle_counting_and_reproducibility():
    # horizon 2: one outer path, middle continuations exist exactly at branch
    # times 0 and 1
    _, model = stopping_model(binomial_preset(horizon=2))
    f = SeededStreamFactory(5)
    bundle = PathBundle(model=model, n_outer=1, n_middle=1, n_inner=0, factory=f)
    assert bundle.outer_innovations().shape == (1, 2, 2)
    assert bundle.middle_innovations("up", 0, 0).shape == (1, 2, 2)
    assert bundle.middle_innovations("up", 0, 1).shape == (1, 1, 2)
    with pytest.raises(ValueError):
        bundle.middle_innovations("up", 0, 2)

    again = PathBundle(model=model, n_outer=1, n_middle=1, n_inner=0,
                       factory=SeededStreamFactory(5))
    assert np.array_equal(bundle.outer_innovations(), again.outer_innovations())
    assert np.array_equal(bundle.middle_innovations("low", 0, 1),
                          again.middle_innovations("low", 0, 1))


def test_generate_bundle_validates_counts():
    _, model = stopping_model(binomial_preset())

    class Cfg:
        n_outer, n_middle, n_inner = 0, 1, 0

    with pytest.raises(ValueError):
        generate_bundle(model, Cfg, SeededStreamFactory(0))


def test_summarize_small_examples():
    est = summarize([1.0, 2.0, 3.0], alpha=0.1)
    assert est.mean == pytest.approx(2.0)
    assert est.sd == pytest.approx(1.0)
    const = summarize(np.full(10, 4.2))
    assert const.sd == 0.0 and const.half_width == 0.0
    assert const.interval == (pytest.approx(4.2), pytest.approx(4.2))
    with pytest.raises(ValueError):
        summarize([1.0])


def test_summarize_matches_normal_quantile():
    est = summarize([0.0, 2.0], alpha=0.05)
    # sd = sqrt(2), half width = 1.959964 * sd / sqrt(2)
    assert est.half_width == pytest.approx(1.959963984540054, rel=1e-12)


def test_ci_coverage_on_lognormal_toy():
    # 95% CI covers the true lognormal mean e^{1/2} in at least 93% of
    # 1000 independent repetitions (n = 400 each)
    rng = SeededStreamFactory(2024).stream("coverage")
    true_mean = np.exp(0.5)
    hits = 0
    reps = 1000
    for _ in range(reps):
        sample = np.exp(standard_normal(rng, 400))
        lo, hi = summarize(sample, alpha=0.05).interval
        hits += lo <= true_mean <= hi
    assert hits / reps >= 0.93


def test_bound_estimate_se():
    est = BoundEstimate(mean=1.0, sd=2.0, count=16, level=0.05, half_width=0.5)
    assert est.se == pytest.approx(0.5)
