"""Random-cluster measure on a box: heat-bath chains, exact enumeration and duality.

The weight of a configuration is ``(p/(1-p))**o * q**k`` where ``o`` counts open
edges and ``k`` counts clusters (after merging the perimeter for wired boundary).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Callable

import numba
import numpy as np
from scipy.special import logsumexp

from .lattice import BOUNDARIES, BoxGeometry, EdgeConfig, _union, label_kernel
from .rng import SWEEP_BLOCK, sweep_uniforms

ENUMERATION_MAX_EDGES = 28


@dataclass(frozen=True)
class RcParams:
    p: float
    q: float = 1.0
    boundary: str = "free"

    def __post_init__(self):
        if not 0 < self.p < 1:
            raise ValueError(f"p must lie in (0, 1), got {self.p}")
        if self.q < 1:
            raise ValueError(f"q must be >= 1, got {self.q}")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}, got {self.boundary!r}")

    @property
    def p_isolated(self) -> float:
        """Open probability of an edge whose endpoints are not connected off it."""
        return self.p / (self.p + (1 - self.p) * self.q)


def conditional_open_probability(p: float, q: float, connected_off_edge: bool) -> float:
    return p if connected_off_edge else p / (p + (1 - p) * q)


def dual_parameter(p: float, q: float) -> float:
    """Solution ``p*`` of ``p p* / ((1-p)(1-p*)) = q``."""
    if not 0 < p < 1:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if q < 1:
        raise ValueError(f"q must be >= 1, got {q}")
    return q * (1 - p) / (p + q * (1 - p))


def self_dual_point(q: float) -> float:
    return math.sqrt(q) / (1 + math.sqrt(q))


# ---------------------------------------------------------------------------
# connectivity off an edge

@numba.njit(cache=True)
def _connected_off_edge(u, v, e, states, nbr, inc, bmask, wired, mark_a, mark_b, stamp, qa, qb):
    """Are ``u`` and ``v`` joined by open edges other than ``e``?

    Two breadth-first searches grow alternately so the cost is governed by the
    smaller of the two clusters. With wired boundary, two clusters that both
    reach the perimeter count as joined.
    """
    if u == v:
        return True
    mark_a[u] = stamp
    mark_b[v] = stamp
    qa[0] = u
    qb[0] = v
    ha, ta, hb, tb = 0, 1, 0, 1
    bnd_a = wired and bmask[u]
    bnd_b = wired and bmask[v]
    if bnd_a and bnd_b:
        return True
    done_a = False
    done_b = False
    while True:
        if not done_a:
            if ha == ta:
                done_a = True
            else:
                w = qa[ha]
                ha += 1
                for j in range(4):
                    f = inc[w, j]
                    if f < 0 or f == e or states[f] == 0:
                        continue
                    z = nbr[w, j]
                    if mark_b[z] == stamp:
                        return True
                    if mark_a[z] != stamp:
                        mark_a[z] = stamp
                        qa[ta] = z
                        ta += 1
                        if wired and bmask[z]:
                            bnd_a = True
                            if bnd_b:
                                return True
        if not done_b:
            if hb == tb:
                done_b = True
            else:
                w = qb[hb]
                hb += 1
                for j in range(4):
                    f = inc[w, j]
                    if f < 0 or f == e or states[f] == 0:
                        continue
                    z = nbr[w, j]
                    if mark_a[z] == stamp:
                        return True
                    if mark_b[z] != stamp:
                        mark_b[z] = stamp
                        qb[tb] = z
                        tb += 1
                        if wired and bmask[z]:
                            bnd_b = True
                            if bnd_a:
                                return True
        if done_a and not (wired and bnd_a):
            return False
        if done_b and not (wired and bnd_b):
            return False
        if done_a and done_b:
            return False


@numba.njit(cache=True)
def _sweeps_kernel(states, endpoints, nbr, inc, bmask, wired, p, p_iso, uniforms,
                   mark_a, mark_b, stamp0, qa, qb, record_code, codes, opens):
    n_sweeps, n_edges = uniforms.shape
    stamp = stamp0
    for s in range(n_sweeps):
        o = 0
        for e in range(n_edges):
            uvar = uniforms[s, e]
            if p == p_iso:
                prob = p
            else:
                stamp += 1
                conn = _connected_off_edge(endpoints[e, 0], endpoints[e, 1], e, states, nbr, inc,
                                           bmask, wired, mark_a, mark_b, stamp, qa, qb)
                prob = p if conn else p_iso
            states[e] = 1 if uvar < prob else 0
            o += states[e]
        opens[s] = o
        if record_code:
            c = 0
            for e in range(n_edges):
                if states[e]:
                    c |= np.int64(1) << e
            codes[s] = c
    return stamp


@dataclass
class ChainState:
    """Mutable heat-bath chain on one box.

    The labeling is recomputed on demand from the current configuration, which
    keeps it consistent by construction.
    """

    geometry: BoxGeometry
    boundary: str
    states: np.ndarray
    seed: int
    chain: int = 0
    sweep_count: int = 0
    _scratch: tuple = field(default=None, repr=False)

    @classmethod
    def start(cls, geometry: BoxGeometry, boundary: str, seed: int, chain: int = 0,
              start: str = "closed") -> ChainState:
        if start not in ("open", "closed"):
            raise ValueError(f"start must be 'open' or 'closed', got {start!r}")
        fill = 1 if start == "open" else 0
        return cls(geometry, boundary, np.full(geometry.n_edges, fill, np.uint8), seed, chain)

    @property
    def config(self) -> EdgeConfig:
        return EdgeConfig(self.geometry, self.states.copy(), self.boundary)

    @property
    def labeling(self):
        from .lattice import label_clusters
        return label_clusters(self.config)

    def scratch(self):
        if self._scratch is None:
            nv = self.geometry.n_vertices
            self._scratch = [np.zeros(nv, np.int64), np.zeros(nv, np.int64), 0,
                             np.empty(nv, np.int64), np.empty(nv, np.int64)]
        return self._scratch


def connected_off_edge(state: ChainState, edge: int) -> bool:
    g = state.geometry
    nbr, inc = g.incidence
    sc = state.scratch()
    sc[2] += 1
    u, v = g.endpoints[edge]
    return bool(_connected_off_edge(u, v, edge, state.states, nbr, inc, g.boundary_mask,
                                    state.boundary == "wired", sc[0], sc[1], sc[2], sc[3], sc[4]))


def edge_open_probability(state: ChainState, params: RcParams, edge: int) -> float:
    """Exact conditional open probability of ``edge`` given all other edges."""
    if not 0 <= edge < state.geometry.n_edges:
        raise IndexError(f"edge {edge} outside 0..{state.geometry.n_edges - 1}")
    if params.q == 1:
        return params.p
    return conditional_open_probability(params.p, params.q, connected_off_edge(state, edge))


def heat_bath_step(state: ChainState, params: RcParams, edge: int, u: float) -> ChainState:
    """Resample one edge from its conditional law using the uniform ``u``."""
    state.states[edge] = 1 if u < edge_open_probability(state, params, edge) else 0
    return state


def _check_boundary(state: ChainState, params: RcParams):
    if state.boundary != params.boundary:
        raise ValueError(f"chain boundary {state.boundary!r} differs from params boundary {params.boundary!r}")


def run_sweeps(state: ChainState, params: RcParams, n_sweeps: int,
               record_codes: bool = False) -> tuple[np.ndarray, np.ndarray | None]:
    """Advance ``n_sweeps`` full sweeps (edges in index order).

    Returns the open-edge count after every sweep and, if requested and the box
    has at most 62 edges, the integer code of the configuration after every sweep.
    """
    _check_boundary(state, params)
    g = state.geometry
    if record_codes and g.n_edges > 62:
        raise ValueError("configuration codes need at most 62 edges")
    nbr, inc = g.incidence
    sc = state.scratch()
    opens = np.empty(n_sweeps, np.int64)
    codes = np.empty(n_sweeps if record_codes else 0, np.int64)
    done = 0
    while done < n_sweeps:
        take = min(SWEEP_BLOCK - state.sweep_count % SWEEP_BLOCK, n_sweeps - done)
        u = sweep_uniforms(state.seed, state.chain, state.sweep_count, take, g.n_edges)
        sc[2] = _sweeps_kernel(state.states, g.endpoints, nbr, inc, g.boundary_mask,
                               state.boundary == "wired", params.p, params.p_isolated, u,
                               sc[0], sc[1], sc[2], sc[3], sc[4], record_codes,
                               codes[done:done + take] if record_codes else codes,
                               opens[done:done + take])
        state.sweep_count += take
        done += take
    return opens, (codes if record_codes else None)


def sweep(state: ChainState, params: RcParams) -> ChainState:
    run_sweeps(state, params, 1)
    return state


def sample_fk(params: RcParams, geometry: BoxGeometry, sweeps: int, seed: int,
              chain: int = 0, start: str = "closed") -> EdgeConfig:
    """Configuration after ``sweeps`` heat-bath sweeps from the all-open or all-closed start."""
    state = ChainState.start(geometry, params.boundary, seed, chain, start)
    if sweeps:
        run_sweeps(state, params, sweeps)
    return state.config


def sample_chain(params: RcParams, geometry: BoxGeometry, n_samples: int, seed: int,
                 chain: int = 0, burn_in: int = 200, thin: int = 10,
                 start: str = "closed") -> np.ndarray:
    """``(n_samples, n_edges)`` array of configurations, thinned after burn-in."""
    state = ChainState.start(geometry, params.boundary, seed, chain, start)
    if burn_in:
        run_sweeps(state, params, burn_in)
    out = np.empty((n_samples, geometry.n_edges), np.uint8)
    for i in range(n_samples):
        run_sweeps(state, params, thin)
        out[i] = state.states
    return out


# ---------------------------------------------------------------------------
# exact enumeration

@numba.njit(cache=True)
def _cluster_counts(endpoints, n_vertices, bverts, wired, start, stop, low_bits):
    """Cluster count of every configuration code in ``[start, stop)``.

    Codes are processed in aligned blocks of ``2**low_bits``; the edges above
    ``low_bits`` are merged once per block and the partial forest is copied.
    """
    n_edges = endpoints.shape[0]
    out = np.empty(stop - start, np.int8)
    base_parent = np.arange(n_vertices)
    base_rank = np.zeros(n_vertices, np.int64)
    parent = np.empty(n_vertices, np.int64)
    rank = np.empty(n_vertices, np.int64)
    block = np.int64(1) << low_bits
    c = start
    while c < stop:
        hi = c >> low_bits
        for v in range(n_vertices):
            base_parent[v] = v
            base_rank[v] = 0
        k_hi = n_vertices
        if wired:
            for i in range(1, bverts.shape[0]):
                if _union(base_parent, base_rank, bverts[0], bverts[i]):
                    k_hi -= 1
        for e in range(low_bits, n_edges):
            if (hi >> (e - low_bits)) & 1:
                if _union(base_parent, base_rank, endpoints[e, 0], endpoints[e, 1]):
                    k_hi -= 1
        end = min(stop, (hi + 1) * block)
        while c < end:
            lo = c & (block - 1)
            for v in range(n_vertices):
                parent[v] = base_parent[v]
                rank[v] = base_rank[v]
            k = k_hi
            for e in range(low_bits):
                if (lo >> e) & 1:
                    if _union(parent, rank, endpoints[e, 0], endpoints[e, 1]):
                        k -= 1
            out[c - start] = k
            c += 1
    return out


@numba.njit(cache=True)
def _root(parent, v):
    while parent[v] != v:
        v = parent[v]
    return v


@numba.njit(cache=True)
def _ok_histogram_dfs(endpoints, n_vertices, bverts, wired):
    """Histogram of (open edges, clusters) over all configurations.

    Depth-first over edge states with an undoable union-find (union by rank,
    no path compression), so each configuration costs O(log V).
    """
    n_edges = endpoints.shape[0]
    hist = np.zeros((n_edges + 1, n_vertices + 1), np.int64)
    parent = np.arange(n_vertices)
    rank = np.zeros(n_vertices, np.int64)
    k = n_vertices
    if wired:
        for i in range(1, bverts.shape[0]):
            a = _root(parent, bverts[0])
            b = _root(parent, bverts[i])
            if a != b:
                if rank[a] < rank[b]:
                    a, b = b, a
                parent[b] = a
                if rank[a] == rank[b]:
                    rank[a] += 1
                k -= 1
    choice = np.full(n_edges, -1, np.int64)
    undo_child = np.full(n_edges, -1, np.int64)
    undo_rank = np.zeros(n_edges, np.bool_)
    o = 0
    d = 0
    last = n_edges - 1
    while d >= 0:
        if d == last:
            a = _root(parent, endpoints[d, 0])
            b = _root(parent, endpoints[d, 1])
            hist[o, k] += 1
            if a == b:
                hist[o + 1, k] += 1
            else:
                hist[o + 1, k - 1] += 1
            d -= 1
            continue
        c = choice[d]
        if c == 1:
            if undo_child[d] >= 0:
                ch = undo_child[d]
                if undo_rank[d]:
                    rank[parent[ch]] -= 1
                parent[ch] = ch
                k += 1
            o -= 1
            choice[d] = -1
            d -= 1
            continue
        if c == -1:
            choice[d] = 0
        else:
            choice[d] = 1
            o += 1
            a = _root(parent, endpoints[d, 0])
            b = _root(parent, endpoints[d, 1])
            undo_child[d] = -1
            undo_rank[d] = False
            if a != b:
                if rank[a] < rank[b]:
                    a, b = b, a
                parent[b] = a
                undo_child[d] = b
                if rank[a] == rank[b]:
                    rank[a] += 1
                    undo_rank[d] = True
                k -= 1
        d += 1
    return hist


def _popcount(codes: np.ndarray) -> np.ndarray:
    return np.bitwise_count(codes.astype(np.uint64)).astype(np.int64)


def _unpack(codes: np.ndarray, n_edges: int) -> np.ndarray:
    return ((codes[:, None] >> np.arange(n_edges, dtype=np.int64)) & 1).astype(np.uint8)


CHUNK = 1 << 20

# A vectorized event maps an (m, n_edges) uint8 state matrix to a bool array.
Event = Callable[[np.ndarray, BoxGeometry, str], np.ndarray]


def per_config_event(pred: Callable[[EdgeConfig], bool]) -> Event:
    """Lift a single-configuration predicate to a vectorized event."""
    def event(states, geometry, boundary):
        return np.array([bool(pred(EdgeConfig(geometry, s, boundary))) for s in states])
    return event


def edge_open_event(*edges: int) -> Event:
    """All listed edges open (an increasing event)."""
    idx = list(edges)

    def event(states, geometry, boundary):
        return states[:, idx].all(axis=1)
    return event


def _check_budget(geometry: BoxGeometry):
    if geometry.n_edges > ENUMERATION_MAX_EDGES:
        raise ValueError(
            f"exact enumeration refused: box {geometry} has {geometry.n_edges} edges, "
            f"budget is {ENUMERATION_MAX_EDGES}"
        )


def ok_histogram(geometry: BoxGeometry, boundary: str, event: Event | None = None) -> np.ndarray:
    """``N[o, k]``: number of configurations (in ``event``) with ``o`` open edges and ``k`` clusters."""
    if event is None:
        return _full_histogram(geometry, boundary).copy()
    return _histogram(geometry, boundary, event)


@lru_cache(maxsize=64)
def _full_histogram(geometry: BoxGeometry, boundary: str) -> np.ndarray:
    _check_budget(geometry)
    return _ok_histogram_dfs(geometry.endpoints, geometry.n_vertices,
                             np.flatnonzero(geometry.boundary_mask), boundary == "wired")


def _histogram(geometry, boundary, event):
    _check_budget(geometry)
    E, V = geometry.n_edges, geometry.n_vertices
    bverts = np.flatnonzero(geometry.boundary_mask)
    hist = np.zeros((E + 1, V + 1), np.int64)
    total = 1 << E
    low = min(E, 12)
    for start in range(0, total, CHUNK):
        stop = min(total, start + CHUNK)
        codes = np.arange(start, stop, dtype=np.int64)
        k = _cluster_counts(geometry.endpoints, V, bverts, boundary == "wired", start, stop, low)
        o = _popcount(codes)
        if event is not None:
            mask = np.asarray(event(_unpack(codes, E), geometry, boundary), dtype=bool)
            o, k = o[mask], k[mask]
        np.add.at(hist, (o, k.astype(np.int64)), 1)
    return hist


def _log_weights(params: RcParams, n_o: int, n_k: int) -> np.ndarray:
    o = np.arange(n_o)[:, None]
    k = np.arange(n_k)[None, :]
    return o * math.log(params.p / (1 - params.p)) + k * math.log(params.q)


def _exact_weight(hist: np.ndarray, p: Fraction, q: Fraction) -> Fraction:
    ratio = p / (1 - p)
    total = Fraction(0)
    for o, k in zip(*np.nonzero(hist)):
        total += int(hist[o, k]) * ratio ** int(o) * q ** int(k)
    return total


def exact_enumerate(params: RcParams, geometry: BoxGeometry, event: Event | None = None):
    """Exact probability of ``event`` under the random-cluster measure on the box.

    Returns a :class:`~fractions.Fraction` when ``p`` and ``q`` are Fractions
    (or integers), otherwise a float computed in log space.
    """
    full = _full_histogram(geometry, params.boundary)
    if event is None:
        return Fraction(1) if isinstance(params.p, Fraction) else 1.0
    part = _histogram(geometry, params.boundary, event)
    if isinstance(params.p, Fraction) and isinstance(params.q, (Fraction, int)):
        q = Fraction(params.q)
        return _exact_weight(part, params.p, q) / _exact_weight(full, params.p, q)
    lw = _log_weights(params, *full.shape)
    if not part.any():
        return 0.0
    num = logsumexp(lw[part > 0] + np.log(part[part > 0]))
    den = logsumexp(lw[full > 0] + np.log(full[full > 0]))
    return float(np.exp(num - den))


def ok_law(params: RcParams, geometry: BoxGeometry) -> np.ndarray:
    """Exact joint law of (open edges, clusters), shape ``(n_edges + 1, n_vertices + 1)``."""
    full = _full_histogram(geometry, params.boundary)
    lw = _log_weights(params, *full.shape)
    with np.errstate(divide="ignore"):
        lp = np.where(full > 0, lw + np.log(np.maximum(full, 1)), -np.inf)
    return np.exp(lp - logsumexp(lp[full > 0]))


def config_law(params: RcParams, geometry: BoxGeometry) -> np.ndarray:
    """Exact probability of every configuration code (boxes with at most 22 edges)."""
    if geometry.n_edges > 22:
        raise ValueError("full configuration law limited to 22 edges")
    E = geometry.n_edges
    codes = np.arange(1 << E, dtype=np.int64)
    k = _cluster_counts(geometry.endpoints, geometry.n_vertices, np.flatnonzero(geometry.boundary_mask),
                        params.boundary == "wired", 0, 1 << E, min(E, 12)).astype(np.int64)
    lw = _popcount(codes) * math.log(params.p / (1 - params.p)) + k * math.log(params.q)
    return np.exp(lw - logsumexp(lw))


@numba.njit(cache=True)
def _codes_cluster_counts(endpoints, n_vertices, bverts, wired, codes):
    n_edges = endpoints.shape[0]
    out = np.empty(codes.size, np.int64)
    states = np.empty(n_edges, np.uint8)
    for i in range(codes.size):
        c = codes[i]
        for e in range(n_edges):
            states[e] = (c >> e) & 1
        out[i] = label_kernel(n_vertices, endpoints, states, bverts, wired)[2]
    return out


def config_cluster_counts(geometry: BoxGeometry, boundary: str, codes: np.ndarray) -> np.ndarray:
    """Cluster count for each configuration code in ``codes``."""
    codes = np.ascontiguousarray(codes, dtype=np.int64)
    uniq, inv = np.unique(codes, return_inverse=True)
    k = _codes_cluster_counts(geometry.endpoints, geometry.n_vertices,
                              np.flatnonzero(geometry.boundary_mask), boundary == "wired", uniq)
    return k[inv.ravel()]


# ---------------------------------------------------------------------------
# FKG

@dataclass(frozen=True)
class FkgResult:
    lhs: float
    rhs: float
    lhs_se: float
    rhs_se: float
    exact: bool

    @property
    def passes(self) -> bool:
        return self.lhs >= self.rhs - 3 * math.hypot(self.lhs_se, self.rhs_se)


def fkg_check(params: RcParams, geometry: BoxGeometry, event_a: Event, event_b: Event,
              samples: int | None = None, seed: int = 0, thin: int = 10) -> FkgResult:
    """Compare ``P[A and B]`` with ``P[A] P[B]`` for increasing events.

    ``samples=None`` evaluates exactly by enumeration; otherwise a heat-bath
    chain supplies ``samples`` thinned configurations.
    """
    if samples is None:
        both = lambda s, g, b: event_a(s, g, b) & event_b(s, g, b)
        pa = exact_enumerate(params, geometry, event_a)
        pb = exact_enumerate(params, geometry, event_b)
        pab = exact_enumerate(params, geometry, both)
        return FkgResult(float(pab), float(pa * pb), 0.0, 0.0, True)
    states = sample_chain(params, geometry, samples, seed, thin=thin)
    a = np.asarray(event_a(states, geometry, params.boundary), bool)
    b = np.asarray(event_b(states, geometry, params.boundary), bool)
    ab = a & b
    pa, pb, pab = a.mean(), b.mean(), ab.mean()
    se = lambda x: math.sqrt(max(x * (1 - x), 1e-300) / samples)
    rhs_se = math.hypot(pb * se(pa), pa * se(pb))
    return FkgResult(float(pab), float(pa * pb), se(pab), rhs_se, False)
