from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fkwatermelon.geometry import ConeParams
from fkwatermelon.walks import (IncrementDist, brute_force_bridge_count, cached_forward,
                                confinement_tail, dp_cache_path, dp_weyl_kernel, estimate_V, km_bridge_count,
                                non_confinement_count, nonintdiam_check, nonintdiam_raster, repulsion_stats,
                                sample_conditioned_bridge, sample_system, single_path_count, weyl_forward)


def test_increment_dist_validation():
    with pytest.raises(ValueError):
        IncrementDist(((1, 1, 1.0),))          # not centred
    with pytest.raises(ValueError):
        IncrementDist(((0, 0, 1.0),))          # theta must be >= 1
    with pytest.raises(ValueError):
        IncrementDist(((1, -1, 0.4), (1, 1, 0.4)))
    d = IncrementDist(((1, 0, 0.5), (2, -1, 0.25), (2, 1, 0.25)))
    assert d.max_theta == 2 and not d.unit_time
    assert d.variance_rate() == pytest.approx(0.5 / 1.5)
    assert IncrementDist.simple().exact and IncrementDist.simple().fits_cone(ConeParams(1.0))
    assert not IncrementDist.simple().fits_cone(ConeParams(0.5))


def test_increment_dist_parse():
    assert IncrementDist.parse("simple") == IncrementDist.simple()
    assert IncrementDist.parse("lazy:0.25").key() == IncrementDist.lazy(0.25).key()
    t = IncrementDist.parse("table:1,0,0.5;2,-1,0.25;2,1,0.25")
    assert t.max_theta == 2
    with pytest.raises(ValueError):
        IncrementDist.parse("gaussian")


def test_km_examples():
    assert km_bridge_count(2, [0, 2], [0, 2], 2) == (3, Fraction(3, 16))
    assert brute_force_bridge_count(2, [0, 2], [0, 2], 2) == 3
    assert km_bridge_count(1, [0], [2], 4)[0] == single_path_count(4, 2) == 4
    assert km_bridge_count(2, [0, 2], [0, 2], 3) == (0, Fraction(0))
    with pytest.raises(ValueError):
        km_bridge_count(2, [0, 1], [0, 1], 2)
    with pytest.raises(ValueError):
        km_bridge_count(2, [2, 0], [0, 2], 2)


@pytest.mark.parametrize("x,y,n", [((0, 2), (0, 2), 4), ((0, 2), (2, 4), 4), ((-2, 0, 2), (-2, 0, 2), 4),
                                   ((0, 4), (0, 2), 6)])
def test_km_matches_brute_force(x, y, n):
    assert km_bridge_count(len(x), x, y, n)[0] == brute_force_bridge_count(len(x), x, y, n)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10), st.integers(-3, 3), st.integers(1, 3), st.integers(-3, 3), st.integers(1, 3))
def test_exact_dp_equals_km(n, x0, gx, y0, gy):
    x = (2 * x0, 2 * x0 + 2 * gx)
    y = (2 * y0 + n % 2, 2 * y0 + n % 2 + 2 * gy)
    count, prob = km_bridge_count(2, x, y, n)
    assert dp_weyl_kernel(IncrementDist.simple(), 2, x, y, n) == prob


def test_dp_at_zero_steps_is_indicator():
    d = IncrementDist.simple()
    assert dp_weyl_kernel(d, 2, [0, 2], [0, 2], 0) == 1
    assert dp_weyl_kernel(d, 2, [0, 2], [0, 4], 0) == 0


def test_dp_monotone_in_initial_gap():
    d = IncrementDist.lazy(0.25)
    n = 30
    vals = [float(weyl_forward(d, 2, [0, g], n, exact=False).layers[n].sum()) for g in range(1, 8)]
    assert np.all(np.diff(vals) > 0)


def test_dp_with_random_time_steps_matches_monte_carlo():
    d = IncrementDist(((1, 0, 0.5), (2, -1, 0.25), (2, 1, 0.25)))
    fk = weyl_forward(d, 2, [0, 2], 12, exact=False)
    exact = float(fk.at(12, [0, 2]))
    hits = 0
    N = 40_000
    for s in range(N):
        w = sample_system(d, 2, [0, 2], 12, seed=s)
        upto = w.times[0] <= 12
        hits += w.hits(12, [0, 2]) and bool(np.all(w.gaps()[upto] > 0))
    se = math.sqrt(exact * (1 - exact) / N)
    assert abs(hits / N - exact) < 4 * se


def test_sample_system_shapes_and_synchronization():
    d = IncrementDist(((1, 0, 0.5), (2, -1, 0.25), (2, 1, 0.25)))
    w = sample_system(d, 3, [0, 2, 4], 50, seed=1)
    assert w.times.shape == w.heights.shape == (3, 51)
    assert np.all(w.times == w.times[0])
    u = sample_system(d, 3, [0, 2, 4], 50, seed=1, synchronized=False)
    assert not np.all(u.times == u.times[0])
    assert np.array_equal(sample_system(d, 3, [0, 2, 4], 50, seed=1).heights, w.heights)
    with pytest.raises(ValueError):
        sample_system(d, 3, [0, 2], 5, seed=1)


def test_bridge_samplers_agree():
    d = IncrementDist.simple()
    x = y = [0, 2]
    n = 20
    a = sample_conditioned_bridge(d, 2, x, y, n, 4000, seed=2, method="rejection")
    b = sample_conditioned_bridge(d, 2, x, y, n, 4000, seed=2, method="dp-backward")
    ma = a.min_gaps()[:, 1:-1].max(axis=1)
    mb = b.min_gaps()[:, 1:-1].max(axis=1)
    assert stats.ks_2samp(ma, mb).pvalue > 1e-3
    assert stats.ks_2samp(a.heights[:, 0, n // 2], b.heights[:, 0, n // 2]).pvalue > 1e-3


def test_dp_backward_midpoint_matches_exact_marginal():
    d = IncrementDist.simple()
    x = y = (0, 2)
    n = 16
    N = 20_000
    s = sample_conditioned_bridge(d, 2, x, y, n, N, seed=5)
    fwd = weyl_forward(d, 2, x, n // 2, exact=False)
    bwd = weyl_forward(d, 2, y, n // 2, H=fwd.grid.H, exact=False)   # reversible walk
    joint = fwd.layers[n // 2] * bwd.layers[n // 2]
    joint /= joint.sum()
    H = fwd.grid.H
    emp = np.zeros_like(joint)
    np.add.at(emp, (s.heights[:, 0, n // 2] + H, s.heights[:, 1, n // 2] + H), 1.0 / N)
    support = int((joint > 1e-12).sum())
    assert 0.5 * np.abs(emp - joint).sum() < 2 * math.sqrt(support / (2 * math.pi * N))


def test_bridge_sampler_errors():
    d = IncrementDist.simple()
    with pytest.raises(ValueError):
        sample_conditioned_bridge(d, 2, [0, 2], [0, 2], 3, 10, seed=0)
    with pytest.raises(ValueError):
        sample_conditioned_bridge(d, 2, [0, 2], [0, 2], 4, 10, seed=0, method="exact")


def test_dp_cache_round_trip(tmp_path):
    d = IncrementDist.lazy(0.3)
    a = cached_forward(d, 2, [0, 3], 20, cache_dir=tmp_path)
    path = dp_cache_path(tmp_path, d, 2, [0, 3], 20, a.grid.H)
    assert path.exists()
    b = cached_forward(d, 2, [0, 3], 20, cache_dir=tmp_path)
    assert all(np.array_equal(u, v) for u, v in zip(a.layers, b.layers))
    assert a.leaked == b.leaked
    assert dp_cache_path(tmp_path, d, 2, [0, 4], 20, a.grid.H) != path


def test_leak_is_reported_for_small_grids():
    d = IncrementDist.simple()
    assert weyl_forward(d, 2, [0, 2], 30, exact=False).leaked < 1e-12
    assert weyl_forward(d, 2, [0, 2], 30, H=4, exact=False).leaked > 0.01


def random_system(rng, r, m, unit=False):
    d = IncrementDist.simple() if unit else IncrementDist(((1, 0, 0.5), (2, -2, 0.25), (2, 2, 0.25)))
    start = np.sort(rng.choice(np.arange(-6, 7), size=r, replace=False))
    return sample_system(d, r, start, m, seed=int(rng.integers(1 << 30)))


def test_nonintdiam_matches_raster():
    rng = np.random.default_rng(0)
    cone = ConeParams(1.0)
    outcomes = set()
    for _ in range(150):
        w = random_system(rng, int(rng.integers(2, 4)), 6)
        ok = nonintdiam_check(w, cone)
        assert ok == nonintdiam_raster(w, cone)
        outcomes.add(ok)
    assert outcomes == {True, False}


def test_nonintdiam_single_walk_and_cone_check():
    w = random_system(np.random.default_rng(1), 1, 8)
    assert nonintdiam_check(w, ConeParams(1.0))
    with pytest.raises(ValueError):
        nonintdiam_check(w, ConeParams(0.5))


def test_repulsion_trivial_for_one_walk():
    d = IncrementDist.simple()
    s = sample_conditioned_bridge(d, 1, [0], [0], 16, 100, seed=1)
    r = repulsion_stats(s)
    assert (r.eta_late, r.last_early, r.bulk_small) == (0.0, 0.0, 0.0)


def test_non_confinement_count_examples():
    assert non_confinement_count([0, 1, 2, 1, 0], np.zeros(5), 1.5, 4) == 4
    assert non_confinement_count([0, 1, 2, 1, 0], np.zeros(5), 1.0, 4) == 2
    assert non_confinement_count([0, 1, 2, 1, 0], [0, 1, 2, 1, 0], 0.5, 2) == 3
    with pytest.raises(ValueError):
        non_confinement_count([0, 1], [0, 1], 1, 4)


def test_confinement_tail_examples():
    # the walk sits at 0 at time 0 and leaves a tube of width 1 at once
    assert confinement_tail(4, 1.0, 0.0) == 1.0
    # returns to 0 at time 2 have probability 1/2, so P[count > 1] over 2 steps is 1/2
    assert confinement_tail(2, 1.0, 1.0) == pytest.approx(0.5)
    assert confinement_tail(3, 1.0, 1.0) == pytest.approx(0.5)


def test_confinement_tail_matches_monte_carlo():
    horizon, tube, thr = 64, 3.0, 20.0
    exact = confinement_tail(horizon, tube, thr)
    N = 40_000
    w = sample_system(IncrementDist.simple(), N, np.zeros(N, np.int64), horizon, seed=3)
    counts = (np.abs(w.heights) < tube).sum(axis=1)
    se = math.sqrt(exact * (1 - exact) / N)
    assert abs((counts > thr).mean() - exact) < 4 * se


def test_harmonic_function_properties():
    d = IncrementDist.lazy(0.25)
    v = estimate_V(d, 2, 40, method="solve")
    assert v.converged
    vals = v.values
    assert np.all(np.diff(vals) > 0)
    ratio = vals / v.delta_grid()
    assert np.all(np.abs(ratio[-10:] - 1) < 0.05)
    assert v([0, 5]) == pytest.approx(vals[4]) and v([3, 3]) == 0.0
    it = estimate_V(d, 2, 40, method="iterate", tol=1e-12)
    assert np.allclose(it.values, vals, rtol=1e-5)
    with pytest.raises(ValueError):
        estimate_V(d, 1, 10)


def test_harmonic_function_is_harmonic_in_the_interior():
    d = IncrementDist.simple()
    v = estimate_V(d, 3, 14, method="solve")
    g = v.values
    # simple walks: gap increments are (d1 - d0, d2 - d1) with d in {-1, 1}^3
    steps = {}
    for a in (-1, 1):
        for b in (-1, 1):
            for c in (-1, 1):
                steps[(b - a, c - b)] = steps.get((b - a, c - b), 0) + 1 / 8
    for i in range(3, 9):
        for j in range(3, 9):
            mean = sum(w * g[i + s0, j + s1] for (s0, s1), w in steps.items())
            assert mean == pytest.approx(g[i, j], rel=1e-8)
