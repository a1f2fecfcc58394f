"""Configurations conditioned on the multiple connection and non-intersection events.

Two routes:

* q = 1: exact lazy exploration. Edges are revealed only when a cluster
  exploration reaches them, so a sample costs the size of the explored clusters.
  The exploration from source ``i`` stops the sample as soon as it fails.
* q >= 1: heat-bath chain samples filtered by :func:`batch_con_ni`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .gibbs import Event, RcParams, sample_chain
from .lattice import BoxGeometry, EnvelopePair, _find, _union, check_weyl
from .rng import derive_seed

JOB_SIZE = 4096


@numba.njit(cache=True)
def _batch_con_ni(states, endpoints, n_vertices, bverts, wired, src, dst):
    m = states.shape[0]
    r = src.shape[0]
    in_con = np.empty(m, np.bool_)
    in_ni = np.empty(m, np.bool_)
    parent = np.empty(n_vertices, np.int64)
    rank = np.empty(n_vertices, np.int64)
    for s in range(m):
        for v in range(n_vertices):
            parent[v] = v
            rank[v] = 0
        if wired:
            for i in range(1, bverts.shape[0]):
                _union(parent, rank, bverts[0], bverts[i])
        for e in range(endpoints.shape[0]):
            if states[s, e]:
                _union(parent, rank, endpoints[e, 0], endpoints[e, 1])
        con = True
        ni = True
        for i in range(r):
            ri = _find(parent, src[i])
            if ri != _find(parent, dst[i]):
                con = False
            for j in range(i):
                if _find(parent, src[j]) == ri:
                    ni = False
        in_con[s] = con
        in_ni[s] = ni
    return in_con, in_ni


def _endpoints_of(geometry: BoxGeometry, x, y):
    x = check_weyl(x, "x")
    y = check_weyl(y, "y")
    if x.size != y.size:
        raise ValueError(f"x and y must have the same length, got {x.size} and {y.size}")
    src = np.array([geometry.vertex(0, int(v)) for v in x], np.int64)
    dst = np.array([geometry.vertex(geometry.n, int(v)) for v in y], np.int64)
    return src, dst


def batch_con_ni(states: np.ndarray, geometry: BoxGeometry, boundary: str, x, y):
    """Membership of every row of ``states`` in Con and in NI."""
    src, dst = _endpoints_of(geometry, x, y)
    states = np.atleast_2d(np.asarray(states, np.uint8))
    return _batch_con_ni(states, geometry.endpoints, geometry.n_vertices,
                         np.flatnonzero(geometry.boundary_mask), boundary == "wired", src, dst)


def con_ni_event(x, y) -> Event:
    def event(states, geometry, boundary):
        con, ni = batch_con_ni(states, geometry, boundary, x, y)
        return con & ni
    return event


def connection_event(a: int, b: int, column_a: int = 0, column_b: int | None = None) -> Event:
    """``(column_a, a)`` connected to ``(column_b, b)``; ``column_b`` defaults to ``n``."""
    def event(states, geometry, boundary):
        cb = geometry.n if column_b is None else column_b
        src = np.array([geometry.vertex(column_a, a)], np.int64)
        dst = np.array([geometry.vertex(cb, b)], np.int64)
        con, _ = _batch_con_ni(np.atleast_2d(states), geometry.endpoints, geometry.n_vertices,
                               np.flatnonzero(geometry.boundary_mask), boundary == "wired", src, dst)
        return con
    return event


# ---------------------------------------------------------------------------
# lazy exploration (q = 1)

@numba.njit(cache=True)
def _seed_numba(seed):
    np.random.seed(seed)


@numba.njit(cache=True)
def _explore_job(nbr, inc, n_edges, rows, h_lo, n, p, src, dst, n_samples,
                 upper, lower, coords, offsets, keep_coords):
    """Run ``n_samples`` explorations; fill envelope buffers for accepted ones.

    Returns ``(processed, accepted, con_only, coord_fill)``. Stops early when an
    output buffer is full so the caller can flush and resume.
    """
    n_vertices = nbr.shape[0]
    r = src.shape[0]
    state = np.full(n_edges, -1, np.int8)
    label = np.full(n_vertices, -1, np.int64)
    revealed = np.empty(n_edges, np.int64)
    visited = np.empty(n_vertices, np.int64)
    max_acc = upper.shape[0]
    acc = 0
    con_only = 0
    fill = 0
    done = 0
    while done < n_samples:
        if acc == max_acc:
            break
        if keep_coords and fill + n_vertices > coords.shape[0]:
            break
        n_rev = 0
        n_vis = 0
        ok = True
        for i in range(r):
            s = src[i]
            if label[s] >= 0:
                ok = False
                break
            label[s] = i
            visited[n_vis] = s
            start = n_vis
            n_vis += 1
            head = start
            stop_now = False
            while head < n_vis:
                w = visited[head]
                head += 1
                for j in range(4):
                    f = inc[w, j]
                    if f < 0:
                        continue
                    if state[f] < 0:
                        state[f] = 1 if np.random.random() < p else 0
                        revealed[n_rev] = f
                        n_rev += 1
                    if state[f] == 1:
                        z = nbr[w, j]
                        if label[z] < 0:
                            label[z] = i
                            visited[n_vis] = z
                            n_vis += 1
                            # a later source swallowed: non-intersection fails
                            for jj in range(i + 1, r):
                                if z == src[jj]:
                                    stop_now = True
                if stop_now:
                    break
            if stop_now or label[dst[i]] != i:
                ok = False
                break
        if ok:
            for i in range(r):
                for k in range(n + 1):
                    upper[acc, i, k] = -(1 << 60)
                    lower[acc, i, k] = 1 << 60
            for t in range(n_vis):
                v = visited[t]
                k = v // rows
                l = v % rows + h_lo
                i = label[v]
                if l > upper[acc, i, k]:
                    upper[acc, i, k] = l
                if l < lower[acc, i, k]:
                    lower[acc, i, k] = l
                if keep_coords:
                    coords[fill, 0] = k
                    coords[fill, 1] = l
                    coords[fill, 2] = i
                    fill += 1
            if keep_coords:
                offsets[acc + 1] = fill
            acc += 1
        for t in range(n_rev):
            state[revealed[t]] = -1
        for t in range(n_vis):
            label[visited[t]] = -1
        done += 1
    return done, acc, con_only, fill


@dataclass
class ConditionedSamples:
    """Accepted Con and NI samples together with the attempt count."""

    geometry: BoxGeometry
    x: np.ndarray
    y: np.ndarray
    attempts: int
    upper: np.ndarray   # (accepted, r, n + 1)
    lower: np.ndarray
    clusters: list | None  # per sample: list of r arrays of (column, row)

    @property
    def accepted(self) -> int:
        return self.upper.shape[0]

    @property
    def r(self) -> int:
        return self.x.size

    @property
    def n(self) -> int:
        return self.geometry.n

    def envelopes(self, s: int) -> EnvelopePair:
        return EnvelopePair(self.upper[s], self.lower[s])

    def probability(self) -> tuple[float, float]:
        """Acceptance frequency and its binomial standard error."""
        ph = self.accepted / self.attempts
        return ph, float(np.sqrt(max(ph * (1 - ph), 1.0 / self.attempts ** 2) / self.attempts))


def explore_con_ni(geometry: BoxGeometry, p: float, x, y, n_samples: int, seed: int,
                   keep_clusters: bool = False, max_accept: int | None = None,
                   job_size: int = JOB_SIZE) -> ConditionedSamples:
    """Exact Bernoulli(p) samples on the box (free boundary) filtered by Con and NI.

    Attempts are split into fixed jobs seeded by ``(seed, job)``. With
    ``max_accept`` the run stops after the job in which that many samples were
    accepted, and ``attempts`` counts only the jobs run.
    """
    if not 0 < p < 1:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    src, dst = _endpoints_of(geometry, x, y)
    nbr, inc = geometry.incidence
    r, n = src.size, geometry.n
    ups, los, clusters = [], [], [] if keep_clusters else None
    attempts = 0
    n_acc = 0
    n_jobs = -(-n_samples // job_size)
    for job in range(n_jobs):
        todo = min(job_size, n_samples - job * job_size)
        _seed_numba(derive_seed(seed, job))
        while todo > 0:
            cap = min(todo, 1024)
            upper = np.empty((cap, r, n + 1), np.int64)
            lower = np.empty((cap, r, n + 1), np.int64)
            ccap = geometry.n_vertices * (cap if keep_clusters else 0)
            coords = np.empty((min(ccap, 1 << 24) if keep_clusters else 0, 3), np.int64)
            offsets = np.zeros(cap + 1, np.int64)
            done, acc, _, fill = _explore_job(nbr, inc, geometry.n_edges, geometry.rows, geometry.h_lo, n,
                                              p, src, dst, todo, upper, lower, coords, offsets,
                                              keep_clusters)
            ups.append(upper[:acc])
            los.append(lower[:acc])
            if keep_clusters:
                for a in range(acc):
                    block = coords[offsets[a]:offsets[a + 1]]
                    clusters.append([block[block[:, 2] == i, :2].copy() for i in range(r)])
            todo -= done
            attempts += done
            n_acc += acc
        if max_accept is not None and n_acc >= max_accept:
            break
    upper = np.concatenate(ups) if ups else np.empty((0, r, n + 1), np.int64)
    lower = np.concatenate(los) if los else np.empty((0, r, n + 1), np.int64)
    x = np.asarray(x, np.int64)
    return ConditionedSamples(geometry, x, np.asarray(y, np.int64), attempts, upper, lower, clusters)


def chain_con_ni(params: RcParams, geometry: BoxGeometry, x, y, n_samples: int, seed: int,
                 burn_in: int = 200, thin: int = 10, chain: int = 0) -> tuple[int, np.ndarray]:
    """Heat-bath route: number of Con and NI samples among ``n_samples`` and their states."""
    states = sample_chain(params, geometry, n_samples, seed, chain, burn_in, thin)
    con, ni = batch_con_ni(states, geometry, params.boundary, x, y)
    keep = con & ni
    return int(keep.sum()), states[keep]


# ---------------------------------------------------------------------------
# heat-bath restricted to Con and NI (q = 1)

@numba.njit(cache=True)
def _relabel(start, new, label, states, nbr, inc, queue):
    """Set ``label`` to ``new`` on the open cluster of ``start``; return its size."""
    old = label[start]
    label[start] = new
    queue[0] = start
    head, tail = 0, 1
    while head < tail:
        w = queue[head]
        head += 1
        for j in range(4):
            f = inc[w, j]
            if f < 0 or states[f] == 0:
                continue
            z = nbr[w, j]
            if label[z] == old:
                label[z] = new
                queue[tail] = z
                tail += 1
    return tail


@numba.njit(cache=True)
def _split_side(u, v, states, nbr, inc, mark_a, mark_b, stamp, qa, qb):
    """With the edge u-v already closed: 0 if u, v still connected, else
    +size if the component of u was exhausted first, -size if that of v was.
    The exhausted component sits in ``qa`` (for u) or ``qb`` (for v)."""
    mark_a[u] = stamp
    mark_b[v] = stamp
    qa[0] = u
    qb[0] = v
    ha, ta, hb, tb = 0, 1, 0, 1
    while True:
        if ha == ta:
            return ta
        w = qa[ha]
        ha += 1
        for j in range(4):
            f = inc[w, j]
            if f < 0 or states[f] == 0:
                continue
            z = nbr[w, j]
            if mark_b[z] == stamp:
                return 0
            if mark_a[z] != stamp:
                mark_a[z] = stamp
                qa[ta] = z
                ta += 1
        if hb == tb:
            return -tb
        w = qb[hb]
        hb += 1
        for j in range(4):
            f = inc[w, j]
            if f < 0 or states[f] == 0:
                continue
            z = nbr[w, j]
            if mark_a[z] == stamp:
                return 0
            if mark_b[z] != stamp:
                mark_b[z] = stamp
                qb[tb] = z
                tb += 1


@numba.njit(cache=True)
def _restricted_sweeps(states, label, nbr, inc, endpoints, src, dst, p, n_sweeps,
                       mark_a, mark_b, stamp, qa, qb):
    """Heat-bath sweeps of Bernoulli(p) percolation restricted to Con and NI.

    Each edge proposes its Bernoulli(p) state; the proposal is refused when it
    would merge two source clusters or cut a source from its target. This is
    the heat-bath kernel of the conditioned measure. Returns ``(stamp, refused)``.
    """
    n_edges = endpoints.shape[0]
    refused = 0
    for _ in range(n_sweeps):
        for e in range(n_edges):
            want = 1 if np.random.random() < p else 0
            if want == states[e]:
                continue
            u = endpoints[e, 0]
            v = endpoints[e, 1]
            lu = label[u]
            lv = label[v]
            if want == 1:
                if lu >= 0 and lv >= 0 and lu != lv:
                    refused += 1
                    continue
                states[e] = 1
                if lu >= 0 and lv < 0:
                    _relabel(v, lu, label, states, nbr, inc, qa)
                elif lv >= 0 and lu < 0:
                    _relabel(u, lv, label, states, nbr, inc, qa)
                continue
            # closing an edge
            states[e] = 0
            if lu < 0:
                continue
            stamp += 1
            side = _split_side(u, v, states, nbr, inc, mark_a, mark_b, stamp, qa, qb)
            if side == 0:
                continue
            i = lu
            size = side if side > 0 else -side
            comp = qa if side > 0 else qb
            has_s = False
            has_t = False
            for t in range(size):
                if comp[t] == src[i]:
                    has_s = True
                if comp[t] == dst[i]:
                    has_t = True
            if has_s != has_t:
                states[e] = 1
                refused += 1
                continue
            if not has_s:
                for t in range(size):
                    label[comp[t]] = -1
            else:
                other = v if side > 0 else u
                _relabel(other, -1, label, states, nbr, inc, qa)
    return stamp, refused


@numba.njit(cache=True)
def _envelopes_from_labels(label, rows, h_lo, n, r, upper, lower):
    for i in range(r):
        for k in range(n + 1):
            upper[i, k] = -(1 << 60)
            lower[i, k] = 1 << 60
    for v in range(label.shape[0]):
        i = label[v]
        if i >= 0:
            k = v // rows
            l = v % rows + h_lo
            if l > upper[i, k]:
                upper[i, k] = l
            if l < lower[i, k]:
                lower[i, k] = l


def _initial_paths(geometry: BoxGeometry, x, y) -> np.ndarray:
    """Open horizontal paths from ``(0, x_i)`` to ``(n, x_i)``; requires ``x == y``."""
    if not np.array_equal(x, y):
        raise ValueError("the default start needs x == y; pass an initial configuration otherwise")
    states = np.zeros(geometry.n_edges, np.uint8)
    for xi in x:
        for k in range(geometry.n):
            states[geometry.horizontal_edge(k, int(xi))] = 1
    return states


class RestrictedChain:
    """Heat-bath chain for Bernoulli(p) percolation on the box conditioned on Con and NI."""

    def __init__(self, geometry: BoxGeometry, p: float, x, y, seed: int, chain: int = 0,
                 initial: np.ndarray | None = None):
        from .lattice import EdgeConfig, label_clusters
        self.geometry, self.p = geometry, p
        self.x, self.y = check_weyl(x, "x"), check_weyl(y, "y")
        self.src, self.dst = _endpoints_of(geometry, self.x, self.y)
        states = _initial_paths(geometry, self.x, self.y) if initial is None else np.array(initial, np.uint8)
        cfg = EdgeConfig(geometry, states, "free")
        lab = label_clusters(cfg)
        roots = [lab.find(s) for s in self.src]
        if any(lab.find(d) != r_ for d, r_ in zip(self.dst, roots)) or len(set(roots)) != len(roots):
            raise ValueError("initial configuration is not in Con and NI")
        self.label = np.full(geometry.n_vertices, -1, np.int64)
        for i, root in enumerate(roots):
            self.label[lab.parent == root] = i
        self.states = states
        nv = geometry.n_vertices
        self._scratch = [np.zeros(nv, np.int64), np.zeros(nv, np.int64), 0,
                         np.empty(nv, np.int64), np.empty(nv, np.int64)]
        self.seed, self.chain = seed, chain
        self.sweeps_done = 0
        self.refused = 0
        _seed_numba(derive_seed(seed, 0xC0, chain))

    def run(self, n_sweeps: int):
        g = self.geometry
        nbr, inc = g.incidence
        sc = self._scratch
        sc[2], refused = _restricted_sweeps(self.states, self.label, nbr, inc, g.endpoints, self.src, self.dst,
                                            self.p, n_sweeps, sc[0], sc[1], sc[2], sc[3], sc[4])
        self.sweeps_done += n_sweeps
        self.refused += refused

    def envelopes(self) -> tuple[np.ndarray, np.ndarray]:
        g = self.geometry
        r = self.src.size
        up = np.empty((r, g.n + 1), np.int64)
        lo = np.empty((r, g.n + 1), np.int64)
        _envelopes_from_labels(self.label, g.rows, g.h_lo, g.n, r, up, lo)
        return up, lo

    def clusters(self) -> list[np.ndarray]:
        k, l = self.geometry.coords(np.arange(self.geometry.n_vertices))
        return [np.column_stack([k[self.label == i], l[self.label == i]]) for i in range(self.src.size)]


def chain_con_ni_envelopes(geometry: BoxGeometry, p: float, x, y, n_samples: int, seed: int,
                           burn_in: int, thin: int, chains: int = 1,
                           keep_clusters: bool = False) -> ConditionedSamples:
    """Envelope samples from independent restricted chains (``attempts`` is left at 0).

    Chains are seeded by ``(seed, chain)``; samples are concatenated in chain order.
    """
    per = -(-n_samples // chains)
    ups, los, cl = [], [], [] if keep_clusters else None
    for c in range(chains):
        ch = RestrictedChain(geometry, p, x, y, seed, c)
        ch.run(burn_in)
        for _ in range(min(per, n_samples - c * per)):
            ch.run(thin)
            u, l = ch.envelopes()
            ups.append(u)
            los.append(l)
            if keep_clusters:
                cl.append(ch.clusters())
    return ConditionedSamples(geometry, np.asarray(x, np.int64), np.asarray(y, np.int64), 0,
                              np.array(ups), np.array(los), cl)


# ---------------------------------------------------------------------------
# box-finite two-point function (q = 1)

@numba.njit(cache=True)
def _truncated_job(nbr, inc, bmask, n_edges, p, src, dst, n_samples):
    """Count explorations where ``dst`` joins the cluster of ``src`` and it avoids the box boundary."""
    state = np.full(n_edges, -1, np.int8)
    seen = np.zeros(nbr.shape[0], np.bool_)
    revealed = np.empty(n_edges, np.int64)
    visited = np.empty(nbr.shape[0], np.int64)
    hits = 0
    for _ in range(n_samples):
        n_rev = 0
        visited[0] = src
        seen[src] = True
        n_vis = 1
        head = 0
        escaped = False
        while head < n_vis and not escaped:
            w = visited[head]
            head += 1
            for j in range(4):
                f = inc[w, j]
                if f < 0:
                    continue
                if state[f] < 0:
                    state[f] = 1 if np.random.random() < p else 0
                    revealed[n_rev] = f
                    n_rev += 1
                if state[f] == 1:
                    z = nbr[w, j]
                    if not seen[z]:
                        seen[z] = True
                        visited[n_vis] = z
                        n_vis += 1
                        if bmask[z]:
                            escaped = True
                            break
        if not escaped and seen[dst]:
            hits += 1
        for t in range(n_rev):
            state[revealed[t]] = -1
        for t in range(n_vis):
            seen[visited[t]] = False
    return hits


def truncated_box(n: int, margin: int) -> BoxGeometry:
    """Box for the points ``(margin, 0)`` and ``(margin + n, 0)`` with ``margin`` rows of room."""
    return BoxGeometry(n + 2 * margin, -margin, margin)


def explore_truncated_two_point(n: int, margin: int, p: float, n_samples: int, seed: int,
                                job_size: int = JOB_SIZE) -> int:
    """Number of Bernoulli(p) samples where ``(0,0)`` and ``(n,0)`` share a cluster avoiding the boundary.

    Points are placed ``margin`` columns and rows away from every side of the box.
    """
    if not 0 < p < 1:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    g = truncated_box(n, margin)
    nbr, inc = g.incidence
    src, dst = g.vertex(margin, 0), g.vertex(margin + n, 0)
    hits = 0
    for job in range(-(-n_samples // job_size)):
        _seed_numba(derive_seed(seed, 0x7B, job))
        todo = min(job_size, n_samples - job * job_size)
        hits += _truncated_job(nbr, inc, g.boundary_mask, g.n_edges, p, src, dst, todo)
    return int(hits)
