from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fkwatermelon.conditioned import (RestrictedChain, batch_con_ni, chain_con_ni, chain_con_ni_envelopes,
                                      con_ni_event, connection_event, explore_con_ni, explore_truncated_two_point,
                                      truncated_box)
from fkwatermelon.gibbs import RcParams, exact_enumerate, per_config_event
from fkwatermelon.lattice import BoxGeometry, EdgeConfig, check_con_ni, extract_envelopes, label_clusters


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from(["free", "wired"]))
def test_batch_con_ni_matches_single_config(code, boundary):
    g = BoxGeometry(3, 0, 3)
    rng = np.random.default_rng(code)
    states = (rng.random((20, g.n_edges)) < 0.6).astype(np.uint8)
    for x, y in (([0, 2], [1, 3]), ([1], [2]), ([0, 1, 3], [0, 2, 3])):
        con, ni = batch_con_ni(states, g, boundary, x, y)
        for s in range(states.shape[0]):
            ref = check_con_ni(EdgeConfig(g, states[s], boundary), x, y)
            assert (con[s], ni[s]) == (ref.in_con, ref.in_ni)


def test_exploration_matches_enumeration():
    g = BoxGeometry(2, 0, 3)
    x = y = [0, 2]
    exact = exact_enumerate(RcParams(0.6, 1.0), g, con_ni_event(x, y))
    s = explore_con_ni(g, 0.6, x, y, 200_000, seed=3)
    ph, se = s.probability()
    assert abs(ph - exact) < 3 * se


def test_single_cluster_reduces_to_connection():
    g = BoxGeometry(2, -1, 2)
    params = RcParams(0.45, 1.0)
    a = exact_enumerate(params, g, con_ni_event([0], [1]))
    b = exact_enumerate(params, g, connection_event(0, 1))
    assert a == pytest.approx(b, rel=1e-12)


def test_exploration_envelopes_match_labeling():
    g = BoxGeometry(4, -2, 4)
    s = explore_con_ni(g, 0.55, [0, 2], [0, 2], 20_000, seed=8, keep_clusters=True)
    assert s.accepted > 20
    for i in range(min(s.accepted, 30)):
        for c, cl in enumerate(s.clusters[i]):
            for k in range(g.n + 1):
                rows = cl[cl[:, 0] == k, 1]
                assert s.upper[i, c, k] == rows.max() and s.lower[i, c, k] == rows.min()


def test_exploration_is_reproducible():
    g = BoxGeometry(4, -2, 4)
    a = explore_con_ni(g, 0.5, [0, 2], [0, 2], 9000, seed=1, job_size=4000)
    b = explore_con_ni(g, 0.5, [0, 2], [0, 2], 9000, seed=1, job_size=4000)
    assert a.accepted == b.accepted and np.array_equal(a.upper, b.upper)


def test_chain_route_for_q_above_one():
    g = BoxGeometry(2, 0, 2)
    params = RcParams(0.5, 2.0)
    exact = exact_enumerate(params, g, con_ni_event([0, 2], [0, 2]))
    k, states = chain_con_ni(params, g, [0, 2], [0, 2], 40_000, seed=5, thin=3)
    se = math.sqrt(exact * (1 - exact) / 40_000)
    assert abs(k / 40_000 - exact) < 8 * se
    con, ni = batch_con_ni(states, g, "free", [0, 2], [0, 2])
    assert con.all() and ni.all()


def test_restricted_chain_stays_in_event():
    g = BoxGeometry(5, -3, 5)
    ch = RestrictedChain(g, 0.5, [0, 2], [0, 2], seed=2)
    for _ in range(40):
        ch.run(3)
        cfg = EdgeConfig(g, ch.states, "free")
        assert check_con_ni(cfg, [0, 2], [0, 2]) == (True, True)
        env = extract_envelopes(cfg, [0, 2], [0, 2])
        up, lo = ch.envelopes()
        assert np.array_equal(env.upper, up) and np.array_equal(env.lower, lo)
    assert ch.refused > 0


def test_restricted_chain_matches_rejection():
    g = BoxGeometry(4, -3, 5)
    x = [0, 2]
    rej = explore_con_ni(g, 0.5, x, x, 10 ** 9, seed=4, max_accept=3000)
    ch = chain_con_ni_envelopes(g, 0.5, x, x, 3000, seed=4, burn_in=200, thin=8)
    for i in range(2):
        a = 0.5 * (rej.upper[:, i, 2] + rej.lower[:, i, 2])
        b = 0.5 * (ch.upper[:, i, 2] + ch.lower[:, i, 2])
        assert stats.ks_2samp(a, b).pvalue > 1e-3
        wa = (rej.upper[:, i] - rej.lower[:, i]).max(axis=1).mean()
        wb = (ch.upper[:, i] - ch.lower[:, i]).max(axis=1).mean()
        assert abs(wa - wb) < 0.15 * wa + 0.1


def test_restricted_chain_needs_valid_start():
    g = BoxGeometry(3, 0, 3)
    with pytest.raises(ValueError):
        RestrictedChain(g, 0.5, [0, 2], [1, 3], seed=0)
    with pytest.raises(ValueError):
        RestrictedChain(g, 0.5, [0, 2], [0, 2], seed=0, initial=np.zeros(g.n_edges, np.uint8))


def test_truncated_two_point_matches_enumeration():
    n, margin = 1, 1
    g = truncated_box(n, margin)
    assert g.n_edges <= 28
    p = 0.6
    src = (margin, 0)
    dst = (margin + n, 0)

    def pred(cfg):
        lab = label_clusters(cfg)
        if not lab.connected(src, dst):
            return False
        pts = lab.cluster_coords(lab.root_of(*src))
        return not any(g.boundary_mask[g.vertex(int(k), int(l))] for k, l in pts)

    exact = exact_enumerate(RcParams(p, 1.0), g, per_config_event(pred))
    N = 200_000
    k = explore_truncated_two_point(n, margin, p, N, seed=6)
    se = math.sqrt(exact * (1 - exact) / N)
    assert abs(k / N - exact) < 3 * se


def test_inclusion_all_but_one():
    # Con and NI for r clusters implies it for every sub-family
    g = BoxGeometry(4, -2, 6)
    s = explore_con_ni(g, 0.55, [0, 2, 4], [0, 2, 4], 200_000, seed=9, keep_clusters=True)
    assert s.accepted > 0
    for cl in s.clusters[:20]:
        for drop in range(3):
            rest = [c for i, c in enumerate(cl) if i != drop]
            sets = [set(map(tuple, c.tolist())) for c in rest]
            assert not sets[0] & sets[1]
