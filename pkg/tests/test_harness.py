from __future__ import annotations

import math

import numpy as np
import pytest

from fkwatermelon import harness
from fkwatermelon.gibbs import RcParams
from fkwatermelon.lattice import BoxGeometry
from fkwatermelon.walks import IncrementDist


def test_strip_box_padding():
    g = harness.strip_box(16, [0, 4], [0, 4])
    assert (g.n, g.h_lo, g.h_hi) == (16, -18, 22)
    assert harness.strip_box(4, height=1).h_hi == 1


def test_tau_on_a_path_graph_is_minus_log_p():
    # on a single row the two-point function is p^n exactly
    p = 0.7
    est = harness.estimate_tau(RcParams(p, 1.0), [2, 4, 6, 8], 200_000, seed=1, oz_correction=False,
                               geometry_for=lambda n: BoxGeometry(n, 0, 0))
    assert abs(est.tau + math.log(p)) < 3 * est.se + 1e-3
    assert est.bound_ok


def test_two_point_estimate_matches_enumeration_on_a_thin_strip():
    params = RcParams(0.4, 1.0)
    g = BoxGeometry(3, 0, 2)
    exact = float(harness.exact_two_point(params, g))
    (ph, se, _, _), = harness.two_point_estimates(params, [3], 200_000, seed=2, geometry_for=lambda n: g)
    assert abs(ph - exact) < 3 * se


def test_tau_decreases_with_p():
    a = harness.estimate_tau(RcParams(0.2, 1.0), [2, 3, 4, 5], 200_000, seed=3)
    b = harness.estimate_tau(RcParams(0.3, 1.0), [2, 3, 4, 6], 200_000, seed=3)
    assert a.tau > b.tau + 3 * math.hypot(a.se, b.se)


def test_fit_tau_drops_unresolved_points():
    with pytest.warns(UserWarning):
        fit, dropped = harness.fit_tau([2, 4, 6], [0.1, 0.01, 0.0], [0.001, 0.0005, 0.0])
    assert dropped == [6]
    with pytest.raises(ValueError):
        harness.fit_tau([2, 4], [0.1, 0.0], [0.01, 0.0])


def test_con_ni_estimate_matches_enumeration():
    params = RcParams(0.55, 1.0)
    g = BoxGeometry(3, 0, 3)
    exact = harness.estimate_con_ni(params, g, [0, 3], [0, 3], 0, 0, method="enumeration")
    mc = harness.estimate_con_ni(params, g, [0, 3], [0, 3], 200_000, seed=4)
    assert exact.exact and abs(mc.value - exact.value) < 3 * mc.se
    zero = harness.estimate_con_ni(RcParams(0.05, 1.0), BoxGeometry(12, 0, 3), [0, 3], [0, 3], 1000, seed=4)
    assert zero.accepted == 0 and zero.upper_bound == pytest.approx(0.003)
    with pytest.raises(ValueError):
        harness.estimate_con_ni(params, g, [0, 3], [0, 3], 10, 0, method="magic")


def test_scaling_fit_recovers_synthetic_parameters():
    n = np.array([8, 12, 16, 24, 32, 48])
    vals = np.exp(1.0 - 2 * 0.1 * n - 2.0 * np.log(n))
    fit = harness.fit_con_ni_scaling(n, vals, vals * 0.01, r=2)
    assert fit["tau"] == pytest.approx(0.1, abs=1e-9) and fit["rho"] == pytest.approx(2.0, abs=1e-8)
    fixed = harness.fit_con_ni_scaling(n, vals, vals * 0.01, r=2, tau_fixed=0.1)
    assert fixed["rho"] == pytest.approx(2.0, abs=1e-8)
    with pytest.raises(ValueError):
        harness.fit_con_ni_scaling(n, -vals, vals, r=2)


def test_walk_surrogate_small_range():
    rep = harness.walk_surrogate_scaling(n_list=range(32, 97, 16))
    assert rep.stats["leaked_mass"] < 1e-9
    assert 1.5 < rep.fits["scaling"]["rho"] < 2.5


def test_oracle_equivalence_small_and_deterministic():
    a = harness.oracle_equivalence(n_max=4, span=2)
    b = harness.oracle_equivalence(n_max=4, span=2)
    assert a.passed and a.stats == b.stats and a.rows == b.rows


def test_globrep_trivial_for_one_cluster():
    s = harness.conditioned_samples(0.4, [0], [0], 8, 40, seed=5)
    row = harness.globrep_violation(s)
    assert (row["t1_late"], row["t2_early"], row["bulk_close"], row["violation"]) == (0, 0, 0, 0)


def test_globrep_union_dominates_parts():
    s = harness.conditioned_samples(0.3, [0, 4], [0, 4], 8, 200, seed=6, thin=8, burn_in=100)
    row = harness.globrep_violation(s)
    assert row["violation"] >= max(row["t1_late"], row["t2_early"], row["bulk_close"])
    assert row["violation"] <= row["t1_late"] + row["t2_early"] + row["bulk_close"] + 1e-12


def test_symmetric_ks_and_midpoints():
    z = np.random.default_rng(0).standard_normal((500, 2))
    z.sort(axis=1)
    assert harness.symmetric_ks(z, z) == 0.0
    assert harness.symmetric_ks(z, 2 * z) > 0.1
    assert harness.symmetric_ks(z, z + 1) > 0.05
    s = harness.conditioned_samples(0.3, [0, 4], [0, 4], 8, 50, seed=7, thin=8, burn_in=50)
    m = harness.scaled_midpoints(s, 1.0, seed=1)
    assert m.shape == (50, 2) and np.all(m[:, 0] < m[:, 1])


def test_budget_marks_partial():
    rep = harness.ExperimentReport("x", {})
    b = harness.Budget(0.0)
    with pytest.raises(harness.BudgetExhausted) as exc:
        b.check(rep)
    assert exc.value.report.partial
    assert not harness.Budget(None).expired()
    assert not rep.passed


def test_non_confinement_small():
    rep = harness.non_confinement_experiment(n_list=(64, 256), mc_n=64, mc_samples=20_000)
    assert rep.flags["mc_matches_exact"] and rep.flags["probability_decreasing"]


def test_harmonic_experiment_small():
    rep = harness.harmonic_experiment(IncrementDist.lazy(0.25), r=2, G=40, gap_min=10)
    assert rep.passed


def test_skeleton_statistics():
    s = harness.conditioned_samples(0.3, [0, 4], [0, 4], 8, 30, seed=8, thin=8, burn_in=50, keep_clusters=True)
    st = harness.skeleton_statistics(s)
    assert 0 < st["renewal_per_column"] <= 1
    with pytest.raises(ValueError):
        harness.skeleton_statistics(harness.conditioned_samples(0.3, [0, 4], [0, 4], 8, 5, seed=8))
