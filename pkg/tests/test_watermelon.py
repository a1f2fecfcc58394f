from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fkwatermelon.watermelon import (RejectionBudgetExceeded, coordinate_cdf, ks_distance, ks_threshold,
                                     marginal_density, midpoint_ks, normalizer, sample_watermelon, vandermonde)


def closed_form_normalizer(r, t):
    # Gaussian moment of Delta^2 is (2 pi)^(r/2) s^(r^2/2) prod_{j<=r} j!, which cancels the s prefactor
    prod = math.prod(math.factorial(j) for j in range(1, r + 1))
    return (2 * math.pi) ** (r / 2) * prod / math.factorial(r)


def test_vandermonde_examples():
    assert vandermonde([0, 1, 3]) == 6
    assert vandermonde([2]) == 1
    assert vandermonde([1, 0]) == -1


def test_density_r1_at_zero():
    # standard bridge at t=1/2 has variance 1/4, so the density at 0 is 2 / sqrt(2 pi)
    assert marginal_density(1, 0.5, [0.0]) == pytest.approx(2 / math.sqrt(2 * math.pi), rel=1e-9)
    assert marginal_density(1, 0.5, [0.0]) == pytest.approx(0.7979, abs=1e-4)


@pytest.mark.parametrize("r,t", [(1, 0.5), (2, 0.5), (2, 0.3), (3, 0.5)])
def test_normalizer_matches_closed_form(r, t):
    assert normalizer(r, t) == pytest.approx(closed_form_normalizer(r, t), rel=1e-6)


@given(st.floats(-1, 1), st.floats(0.01, 1), st.sampled_from([0.2, 0.5, 0.8]))
def test_density_symmetry_and_support(a, g, t):
    z = np.array([a, a + g])
    assert marginal_density(2, t, z) == pytest.approx(marginal_density(2, t, -z[::-1]), rel=1e-12)
    assert marginal_density(2, t, z[::-1]) == 0.0
    assert marginal_density(2, t, z) == pytest.approx(marginal_density(2, 1 - t, z), rel=1e-12)


def test_density_rejects_bad_input():
    with pytest.raises(ValueError):
        marginal_density(2, 1.0, [0, 1])
    with pytest.raises(ValueError):
        marginal_density(2, 0.5, [0, 1, 2])


def test_coordinate_cdf_symmetry():
    F0 = coordinate_cdf(2, 0.5, 0)
    F1 = coordinate_cdf(2, 0.5, 1)
    for a in (-0.6, -0.2, 0.0, 0.3):
        assert F0(a) == pytest.approx(1 - F1(-a), abs=1e-6)
    assert F0(0.0) > 0.5 > F1(0.0)


def test_matrix_bridge_ordering_and_pinning():
    w = sample_watermelon(3, 32, 500, seed=1)
    assert np.all(np.diff(w.heights[:, :, 1:-1], axis=1) > 0)
    assert np.allclose(w.heights[:, :, 0], 0) and np.allclose(w.heights[:, :, -1], 0, atol=1e-12)
    assert np.array_equal(sample_watermelon(3, 32, 500, seed=1).heights, w.heights)


def test_r1_variance_is_one_quarter():
    N = 20_000
    h = sample_watermelon(1, 16, N, seed=3).at(0.5)[:, 0]
    se = 0.25 * math.sqrt(2 / (N - 1))
    assert abs(h.var(ddof=1) - 0.25) < 3 * se


def test_matrix_bridge_midpoint_passes_ks_gate():
    N = 10_000
    h = sample_watermelon(2, 16, N, seed=4).at(0.5)
    ks = midpoint_ks(h, 2)
    assert np.all(ks < ks_threshold(0.01, N))


def test_samplers_agree():
    a = sample_watermelon(2, 1024, 4000, seed=5, method="epsilon-rejection", eps=0.1).at(0.5)
    b = sample_watermelon(2, 64, 4000, seed=6).at(0.5)
    for i in range(2):
        assert ks_distance(a[:, i], b[:, i]) < ks_threshold(0.001, 4000, 4000)


def test_rejection_budget():
    with pytest.raises(RejectionBudgetExceeded):
        sample_watermelon(3, 64, 1000, seed=0, method="epsilon-rejection", eps=0.01, max_attempts=1000)
    with pytest.raises(ValueError):
        sample_watermelon(2, 8, 10, seed=0, method="epsilon-rejection")


def test_ks_distance_examples():
    assert ks_distance([0.5], lambda x: np.clip(x, 0, 1)) == pytest.approx(0.5)
    assert ks_distance([1, 2, 3], [1, 2, 3]) == 0.0
    assert ks_distance([0, 0], [1, 1]) == 1.0
    with pytest.raises(ValueError):
        ks_distance([], [1])
    assert ks_threshold(0.01, 10_000) == pytest.approx(1.6276 / 100, rel=1e-3)
