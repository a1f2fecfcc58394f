from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fkwatermelon.lattice import (BoxGeometry, EdgeConfig, check_con_ni, count_clusters, envelopes_from_coords,
                                  exterior_boundary, extract_envelopes, internal_edges, label_clusters)


def square():
    return BoxGeometry(1, 0, 1)


def path_config(g, heights, boundary="free"):
    edges = [g.horizontal_edge(k, h) for h in heights for k in range(g.n)]
    return EdgeConfig.from_open_edges(g, edges, boundary)


def flood_fill(config, start):
    g = config.geometry
    seen = {start}
    todo = [start]
    while todo:
        k, l = todo.pop()
        for nb in ((k + 1, l), (k - 1, l), (k, l + 1), (k, l - 1)):
            if g.contains(*nb) and nb not in seen and config.states[g.edge_between((k, l), nb)]:
                seen.add(nb)
                todo.append(nb)
    return seen


configs = st.builds(
    lambda n, lo, height, bits, wired: EdgeConfig(
        BoxGeometry(n, lo, lo + height),
        np.resize(np.array(bits, np.uint8), BoxGeometry(n, lo, lo + height).n_edges),
        "wired" if wired else "free"),
    st.integers(1, 5), st.integers(-3, 3), st.integers(1, 4),
    st.lists(st.integers(0, 1), min_size=1, max_size=60), st.booleans())


def test_geometry_counts_and_bijection():
    g = BoxGeometry(3, -2, 1)
    assert g.n_vertices == 4 * 4
    assert g.n_edges == 3 * 4 + 4 * 3
    ends = {tuple(map(tuple, np.stack(g.coords(e), axis=-1))) for e in g.endpoints}
    assert len(ends) == g.n_edges
    for e, (a, b) in enumerate(g.endpoints):
        assert g.edge_between(g.coords(a), g.coords(b)) == e


def test_geometry_rejects_bad_shapes():
    with pytest.raises(ValueError):
        BoxGeometry(0, 0, 1)
    with pytest.raises(ValueError):
        BoxGeometry(2, 1, 0)
    assert str(BoxGeometry.parse("4,-1,2")) == "4,-1,2"


def test_square_cluster_counts():
    g = square()
    assert g.n_vertices == 4 and g.n_edges == 4
    assert count_clusters(EdgeConfig.all_closed(g)) == 4
    assert count_clusters(EdgeConfig.all_open(g)) == 1
    for e in range(4):
        assert count_clusters(EdgeConfig.from_open_edges(g, [e])) == 3


def test_wired_merges_boundary():
    g = BoxGeometry(2, 0, 2)
    assert count_clusters(EdgeConfig.all_closed(g, "wired")) == 1 + 1  # boundary ring + centre
    assert count_clusters(EdgeConfig.all_open(g, "wired")) == 1


@settings(max_examples=150, deadline=None)
@given(configs)
def test_labeling_matches_flood_fill(config):
    lab = label_clusters(config)
    g = config.geometry
    pts = [(k, l) for k in range(g.n + 1) for l in range(g.h_lo, g.h_hi + 1)]
    assert len({lab.root_of(*v) for v in pts}) == lab.k
    if config.boundary == "free":
        start = pts[len(pts) // 2]
        comp = flood_fill(config, start)
        assert {v for v in pts if lab.connected(v, start)} == comp
    for v in range(g.n_vertices):
        assert lab.find(lab.find(v)) == lab.find(v)


@settings(max_examples=150, deadline=None)
@given(configs, st.integers(0, 10 ** 6))
def test_opening_an_edge_lowers_k_by_zero_or_one(config, pick):
    e = pick % config.geometry.n_edges
    before = count_clusters(config.with_edge(e, 0))
    after = count_clusters(config.with_edge(e, 1))
    assert before - after in (0, 1)


@settings(max_examples=100, deadline=None)
@given(configs)
def test_line_format_round_trip(config):
    line = config.to_line()
    back = EdgeConfig.from_line(line)
    assert back.geometry == config.geometry and back.boundary == config.boundary
    assert np.array_equal(back.states, config.states)
    assert back.code == config.code


def test_line_format_layout():
    g = BoxGeometry(1, 0, 1)
    cfg = EdgeConfig.from_open_edges(g, [0, 2])
    assert cfg.to_line() == "1,0,1;free;05"


def test_con_ni_examples():
    g = BoxGeometry(2, 0, 2)
    full = EdgeConfig.all_open(g)
    assert check_con_ni(full, [0, 1], [0, 1]) == (True, False)
    two = path_config(g, [0, 2])
    assert check_con_ni(two, [0, 2], [0, 2]) == (True, True)
    one = path_config(g, [1])
    assert check_con_ni(one, [1], [1]).in_ni
    with pytest.raises(ValueError):
        check_con_ni(full, [1, 0], [0, 1])
    with pytest.raises(ValueError):
        check_con_ni(full, [0, 1], [1, 1])


def test_ni_allows_interleaving_envelopes():
    # cluster 1 hangs a hook below cluster 0's branch in column 3; the clusters
    # stay disjoint, so NI holds although the envelopes interleave
    g = BoxGeometry(6, 0, 5)
    zero = [((k, 0), (k + 1, 0)) for k in range(6)] + [((2, l), (2, l + 1)) for l in range(3)] + [((2, 3), (3, 3))]
    one = [((k, 5), (k + 1, 5)) for k in range(6)] + [((4, l), (4, l + 1)) for l in range(1, 5)] + [((4, 1), (3, 1))]
    cfg = EdgeConfig.from_open_edges(g, [g.edge_between(u, v) for u, v in zero + one])
    assert check_con_ni(cfg, [0, 5], [0, 5]) == (True, True)
    env = extract_envelopes(cfg, [0, 5], [0, 5])
    assert env.upper[0, 3] == 3 and env.lower[1, 3] == 1
    assert env.upper[0, 3] >= env.lower[1, 3]
    assert np.all(env.lower <= env.upper)


def test_envelope_examples():
    g = BoxGeometry(3, 0, 4)
    env = extract_envelopes(path_config(g, [3]), [3], [3])
    assert np.all(env.upper == 3) and np.all(env.lower == 3)
    e = envelopes_from_coords([np.array([(0, 0), (0, 1), (1, 1)])], 1)
    assert e.upper[0].tolist() == [1, 1] and e.lower[0].tolist() == [0, 1]
    with pytest.raises(ValueError):
        envelopes_from_coords([np.array([(0, 0), (2, 0)])], 2)


@settings(max_examples=80, deadline=None)
@given(configs)
def test_envelopes_match_column_scan(config):
    g = config.geometry
    lab = label_clusters(config)
    root = lab.root_of(0, g.h_lo)
    comp = lab.cluster_coords(root)
    if not set(range(g.n + 1)) <= set(comp[:, 0].tolist()):
        return
    env = envelopes_from_coords([comp], g.n)
    for k in range(g.n + 1):
        rows = [l for (kk, l) in comp.tolist() if kk == k]
        assert env.upper[0, k] == max(rows) and env.lower[0, k] == min(rows)
    assert np.all(env.lower <= env.upper)


def test_exterior_boundary_examples():
    assert len(exterior_boundary([(5, 5)])) == 4
    assert len(exterior_boundary([(5, 5), (6, 5)])) == 6
    cl = [(0, 0), (1, 0), (1, 1), (2, 1)]
    assert not exterior_boundary(cl) & internal_edges(cl)


@settings(max_examples=60, deadline=None)
@given(configs)
def test_boundary_and_open_edges_determine_cluster(config):
    # the cluster of a vertex is the same in every configuration that agrees on
    # its internal open edges and its closed exterior boundary
    g = config.geometry
    lab = label_clusters(EdgeConfig(g, config.states, "free"))
    comp = [tuple(v) for v in lab.cluster_coords(lab.root_of(0, g.h_lo)).tolist()]
    ext = exterior_boundary(comp, g)
    rng = np.random.default_rng(len(comp))
    other = rng.integers(0, 2, g.n_edges).astype(np.uint8)
    keep = np.zeros(g.n_edges, bool)
    for a, b in ext | internal_edges(comp):
        keep[g.edge_between(a, b)] = True
    other[keep] = config.states[keep]
    lab2 = label_clusters(EdgeConfig(g, other, "free"))
    comp2 = {tuple(v) for v in lab2.cluster_coords(lab2.root_of(0, g.h_lo)).tolist()}
    assert comp2 == set(comp)
