import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctta.numerics import (
    BatchStats,
    SeededRng,
    batch_stats,
    cosine_sim,
    entropy,
    euclid,
    softmax,
)
from reference import euclid_direct, two_pass_stats

finite_floats = st.floats(min_value=-50.0, max_value=50.0, allow_nan=False)
small_vectors = st.lists(finite_floats, min_size=1, max_size=10).map(np.array)


def test_softmax_uniform_on_equal_logits():
    np.testing.assert_allclose(softmax([0.0, 0.0, 0.0]), np.full(3, 1 / 3), atol=1e-15)
    np.testing.assert_allclose(softmax([7.3, 7.3]), [0.5, 0.5], atol=1e-15)


def test_softmax_stabilized_against_overflow():
    out = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(out))
    assert out[0] > 1.0 - 1e-12
    assert out[1] < 1e-12


def test_softmax_rejects_empty_and_nonfinite():
    with pytest.raises(ValueError):
        softmax([])
    with pytest.raises(ValueError):
        softmax([1.0, np.nan])


@given(small_vectors)
@settings(max_examples=60, deadline=None)
def test_softmax_sums_to_one_and_is_shift_invariant(v):
    p = softmax(v)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p > 0)
    np.testing.assert_allclose(softmax(v + 3.7), p, atol=1e-12)


def test_entropy_basic_values():
    assert entropy([1.0, 0.0, 0.0]) == 0.0
    assert math.isclose(entropy(np.full(5, 0.2)), math.log(5), rel_tol=1e-12)
    assert math.isclose(entropy([0.5, 0.5, 0.0, 0.0]), math.log(2), rel_tol=1e-12)


def test_entropy_rejects_negative_and_unnormalized():
    with pytest.raises(ValueError):
        entropy([-0.1, 1.1])
    with pytest.raises(ValueError):
        entropy([0.3, 0.3])


@given(small_vectors)
@settings(max_examples=60, deadline=None)
def test_entropy_of_softmax_bounded_by_log_dim(v):
    h = entropy(softmax(v))
    assert -1e-12 <= h <= math.log(len(v)) + 1e-12


def test_batch_stats_zero_spread_and_forced_values():
    v = np.array([1.0, -2.0, 3.0])
    stats = batch_stats([v, v])
    np.testing.assert_array_equal(stats.mu, v)
    np.testing.assert_array_equal(stats.sigma, np.zeros(3))

    stats = batch_stats([np.array([0.0, 0.0]), np.array([2.0, 0.0])])
    np.testing.assert_array_equal(stats.mu, [1.0, 0.0])
    np.testing.assert_array_equal(stats.sigma, [1.0, 0.0])


def test_batch_stats_requires_two_rows():
    with pytest.raises(ValueError):
        batch_stats([np.zeros(3)])


def test_batch_stats_matches_two_pass_oracle():
    rng = SeededRng(11)
    rows = [rng.normal(size=6, scale=2.0) for _ in range(9)]
    stats = batch_stats(rows)
    mu, sigma = two_pass_stats(rows)
    np.testing.assert_allclose(stats.mu, mu, rtol=1e-12)
    np.testing.assert_allclose(stats.sigma, sigma, rtol=1e-12)


def test_batch_stats_rejects_negative_sigma_construction():
    with pytest.raises(ValueError):
        BatchStats(np.zeros(2), np.array([-1.0, 0.0]))


def test_cosine_sim_identity_orthogonal_opposite():
    a = np.array([1.0, 2.0, -3.0])
    assert cosine_sim(a, a) == 1.0
    assert cosine_sim([1.0, 0.0], [0.0, 5.0]) == 0.0
    assert cosine_sim(a, -a) == -1.0


def test_cosine_sim_zero_norm_is_error():
    with pytest.raises(ValueError):
        cosine_sim([0.0, 0.0], [1.0, 0.0])


def test_euclid_examples():
    a = np.array([1.0, 2.0])
    assert euclid(a, a) == 0.0
    assert euclid([0.0, 0.0], [3.0, 4.0]) == 5.0
    with pytest.raises(ValueError):
        euclid([1.0], [1.0, 2.0])


def test_euclid_matches_direct_summation_oracle():
    rng = SeededRng(5)
    a = rng.normal(size=7)
    b = rng.normal(size=7)
    assert math.isclose(euclid(a, b), euclid_direct(a, b), rel_tol=1e-12)


@given(
    st.lists(finite_floats, min_size=2, max_size=6),
    st.lists(finite_floats, min_size=2, max_size=6),
    st.lists(finite_floats, min_size=2, max_size=6),
)
@settings(max_examples=60, deadline=None)
def test_euclid_symmetry_and_triangle(xs, ys, zs):
    n = min(len(xs), len(ys), len(zs))
    a, b, c = np.array(xs[:n]), np.array(ys[:n]), np.array(zs[:n])
    assert euclid(a, b) == euclid(b, a)
    assert euclid(a, c) <= euclid(a, b) + euclid(b, c) + 1e-9


def test_seeded_rng_is_reproducible_and_splittable():
    a = SeededRng(123)
    b = SeededRng(123)
    np.testing.assert_array_equal(a.normal(size=32), b.normal(size=32))
    np.testing.assert_array_equal(a.integers(0, 100, size=16), b.integers(0, 100, size=16))

    c1 = SeededRng(7).child(3).normal(size=8)
    c2 = SeededRng(7).child(3).normal(size=8)
    np.testing.assert_array_equal(c1, c2)
    assert not np.array_equal(SeededRng(7).child(4).normal(size=8), c1)


def test_seeded_rng_known_stream_is_stable():
    # pins the PCG64 stream: a change here means reproducibility broke
    draws = SeededRng(2024).normal(size=3)
    np.testing.assert_allclose(
        draws,
        [1.0288568739519013, 1.6419200406711503, 1.1467195295966137],
        rtol=0,
        atol=0,
    )
