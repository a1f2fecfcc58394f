"""Finite boxes of the square lattice, edge configurations and cluster queries.

Vertices of a box are ``(k, l)`` with column ``0 <= k <= n`` and row
``h_lo <= l <= h_hi``. Vertices and edges are indexed column-major, so the
index bijection depends only on ``(n, h_lo, h_hi)``:

* vertex ``(k, l)`` -> ``k * rows + (l - h_lo)``
* column block ``k`` holds first the vertical edges ``(k, l)-(k, l+1)``,
  then (if ``k < n``) the horizontal edges ``(k, l)-(k+1, l)``.

Configurations serialize to one line ``n,h_lo,h_hi;boundary;hex`` where the hex
string is the little-endian packed edge bitmap.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, NamedTuple, Sequence

import numba
import numpy as np

BOUNDARIES = ("free", "wired")


@dataclass(frozen=True)
class BoxGeometry:
    n: int
    h_lo: int
    h_hi: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"box needs n >= 1, got {self.n}")
        # h_lo == h_hi (a single row) is allowed: it is the path graph.
        if self.h_lo > self.h_hi:
            raise ValueError(f"need h_lo <= h_hi, got {self.h_lo} > {self.h_hi}")

    @classmethod
    def symmetric(cls, n: int, half_height: int) -> BoxGeometry:
        return cls(n, -half_height, half_height)

    @classmethod
    def parse(cls, text: str) -> BoxGeometry:
        n, lo, hi = (int(t) for t in text.split(","))
        return cls(n, lo, hi)

    def __str__(self) -> str:
        return f"{self.n},{self.h_lo},{self.h_hi}"

    @property
    def height(self) -> int:
        return self.h_hi - self.h_lo

    @property
    def rows(self) -> int:
        return self.height + 1

    @property
    def n_vertices(self) -> int:
        return (self.n + 1) * self.rows

    @property
    def n_edges(self) -> int:
        return self.n * self.rows + (self.n + 1) * self.height

    def contains(self, k: int, l: int) -> bool:
        return 0 <= k <= self.n and self.h_lo <= l <= self.h_hi

    def vertex(self, k: int, l: int) -> int:
        if not self.contains(k, l):
            raise ValueError(f"vertex ({k}, {l}) outside box {self}")
        return k * self.rows + (l - self.h_lo)

    def coords(self, v) -> tuple:
        k, off = np.divmod(v, self.rows)
        return k, off + self.h_lo

    def vertical_edge(self, k: int, l: int) -> int:
        """Index of the edge ``(k, l)-(k, l+1)``."""
        if not (0 <= k <= self.n and self.h_lo <= l < self.h_hi):
            raise ValueError(f"no vertical edge at ({k}, {l})")
        return k * (2 * self.height + 1) + (l - self.h_lo)

    def horizontal_edge(self, k: int, l: int) -> int:
        """Index of the edge ``(k, l)-(k+1, l)``."""
        if not (0 <= k < self.n and self.h_lo <= l <= self.h_hi):
            raise ValueError(f"no horizontal edge at ({k}, {l})")
        return k * (2 * self.height + 1) + self.height + (l - self.h_lo)

    def edge_between(self, a: tuple[int, int], b: tuple[int, int]) -> int:
        (k1, l1), (k2, l2) = sorted([tuple(a), tuple(b)])
        if k1 == k2 and l2 == l1 + 1:
            return self.vertical_edge(k1, l1)
        if l1 == l2 and k2 == k1 + 1:
            return self.horizontal_edge(k1, l1)
        raise ValueError(f"{a} and {b} are not nearest neighbours")

    @cached_property
    def endpoints(self) -> np.ndarray:
        """``(n_edges, 2)`` vertex indices, lower-index endpoint first."""
        rows, H = self.rows, self.height
        out = np.empty((self.n_edges, 2), dtype=np.int64)
        e = 0
        for k in range(self.n + 1):
            base = k * rows
            for j in range(H):
                out[e] = (base + j, base + j + 1)
                e += 1
            if k < self.n:
                for j in range(rows):
                    out[e] = (base + j, base + rows + j)
                    e += 1
        out.setflags(write=False)
        return out

    @cached_property
    def incidence(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-vertex neighbour and edge tables, ``-1`` padded to width 4."""
        nbr = np.full((self.n_vertices, 4), -1, dtype=np.int64)
        inc = np.full((self.n_vertices, 4), -1, dtype=np.int64)
        fill = np.zeros(self.n_vertices, dtype=np.int64)
        for e, (u, v) in enumerate(self.endpoints):
            nbr[u, fill[u]] = v
            inc[u, fill[u]] = e
            fill[u] += 1
            nbr[v, fill[v]] = u
            inc[v, fill[v]] = e
            fill[v] += 1
        nbr.setflags(write=False)
        inc.setflags(write=False)
        return nbr, inc

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        """Inner boundary: box vertices with a lattice neighbour outside the box."""
        k, l = self.coords(np.arange(self.n_vertices))
        mask = (k == 0) | (k == self.n) | (l == self.h_lo) | (l == self.h_hi)
        mask.setflags(write=False)
        return mask


@dataclass(frozen=True)
class EdgeConfig:
    geometry: BoxGeometry
    states: np.ndarray = field(repr=False)
    boundary: str = "free"

    def __post_init__(self):
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}, got {self.boundary!r}")
        states = np.ascontiguousarray(self.states, dtype=np.uint8)
        if states.shape != (self.geometry.n_edges,):
            raise ValueError(
                f"states has shape {states.shape}, box {self.geometry} has {self.geometry.n_edges} edges"
            )
        if np.any(states > 1):
            raise ValueError("edge states must be 0 or 1")
        if states is self.states:
            states = states.copy()
        states.setflags(write=False)
        object.__setattr__(self, "states", states)

    @classmethod
    def all_closed(cls, geometry: BoxGeometry, boundary: str = "free") -> EdgeConfig:
        return cls(geometry, np.zeros(geometry.n_edges, np.uint8), boundary)

    @classmethod
    def all_open(cls, geometry: BoxGeometry, boundary: str = "free") -> EdgeConfig:
        return cls(geometry, np.ones(geometry.n_edges, np.uint8), boundary)

    @classmethod
    def from_code(cls, geometry: BoxGeometry, code: int, boundary: str = "free") -> EdgeConfig:
        bits = (int(code) >> np.arange(geometry.n_edges, dtype=object)) & 1
        return cls(geometry, bits.astype(np.uint8), boundary)

    @classmethod
    def from_open_edges(cls, geometry: BoxGeometry, edges: Iterable[int], boundary: str = "free") -> EdgeConfig:
        states = np.zeros(geometry.n_edges, np.uint8)
        states[list(edges)] = 1
        return cls(geometry, states, boundary)

    @property
    def open_count(self) -> int:
        return int(self.states.sum())

    @property
    def code(self) -> int:
        """Integer whose bit ``e`` is the state of edge ``e``."""
        return int.from_bytes(np.packbits(self.states, bitorder="little").tobytes(), "little")

    def with_edge(self, e: int, value: int) -> EdgeConfig:
        states = self.states.copy()
        states[e] = value
        return EdgeConfig(self.geometry, states, self.boundary)

    def to_line(self) -> str:
        bitmap = np.packbits(self.states, bitorder="little").tobytes().hex()
        return f"{self.geometry};{self.boundary};{bitmap}"

    @classmethod
    def from_line(cls, line: str) -> EdgeConfig:
        geo_text, boundary, bitmap = line.strip().split(";")
        geometry = BoxGeometry.parse(geo_text)
        raw = np.frombuffer(bytes.fromhex(bitmap), dtype=np.uint8)
        states = np.unpackbits(raw, bitorder="little")[: geometry.n_edges]
        return cls(geometry, states, boundary)


@numba.njit(cache=True)
def _find(parent, v):
    root = v
    while parent[root] != root:
        root = parent[root]
    while parent[v] != root:
        nxt = parent[v]
        parent[v] = root
        v = nxt
    return root


@numba.njit(cache=True)
def _union(parent, rank, a, b):
    ra = _find(parent, a)
    rb = _find(parent, b)
    if ra == rb:
        return False
    if rank[ra] < rank[rb]:
        ra, rb = rb, ra
    parent[rb] = ra
    if rank[ra] == rank[rb]:
        rank[ra] += 1
    return True


@numba.njit(cache=True)
def label_kernel(n_vertices, endpoints, states, boundary_vertices, wired):
    parent = np.arange(n_vertices)
    rank = np.zeros(n_vertices, dtype=np.int64)
    k = n_vertices
    if wired:
        for i in range(1, boundary_vertices.shape[0]):
            if _union(parent, rank, boundary_vertices[0], boundary_vertices[i]):
                k -= 1
    for e in range(endpoints.shape[0]):
        if states[e]:
            if _union(parent, rank, endpoints[e, 0], endpoints[e, 1]):
                k -= 1
    for v in range(n_vertices):
        _find(parent, v)
    return parent, rank, k


class ClusterLabeling:
    """Union-find partition of the box vertices into open clusters.

    ``parent`` is fully path-compressed after construction, so ``parent[v]`` is
    the root of ``v``.
    """

    def __init__(self, geometry: BoxGeometry, parent: np.ndarray, rank: np.ndarray, k: int):
        self.geometry = geometry
        self.parent = parent
        self.rank = rank
        self.k = int(k)
        parent.setflags(write=False)

    def find(self, v: int) -> int:
        return int(self.parent[v])

    def root_of(self, k: int, l: int) -> int:
        return self.find(self.geometry.vertex(k, l))

    def connected(self, a: tuple[int, int], b: tuple[int, int]) -> bool:
        return self.root_of(*a) == self.root_of(*b)

    def members(self, root: int) -> np.ndarray:
        return np.flatnonzero(self.parent == root)

    def cluster_coords(self, root: int) -> np.ndarray:
        """``(m, 2)`` array of ``(column, row)`` for the cluster with this root."""
        k, l = self.geometry.coords(self.members(root))
        return np.column_stack([k, l])

    def sizes(self) -> dict[int, int]:
        roots, counts = np.unique(self.parent, return_counts=True)
        return dict(zip(roots.tolist(), counts.tolist()))


def label_clusters(config: EdgeConfig) -> ClusterLabeling:
    g = config.geometry
    bnd = np.flatnonzero(g.boundary_mask)
    parent, rank, k = label_kernel(g.n_vertices, g.endpoints, config.states, bnd, config.boundary == "wired")
    return ClusterLabeling(g, parent, rank, k)


def count_clusters(config: EdgeConfig) -> int:
    return label_clusters(config).k


def check_weyl(x: Sequence[int], name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.int64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-d integer vector")
    if np.any(np.diff(arr) <= 0):
        raise ValueError(f"{name}={arr.tolist()} is not strictly increasing (outside the Weyl chamber)")
    return arr


class ConNI(NamedTuple):
    in_con: bool
    in_ni: bool


def _source_target_roots(config, labeling, x, y):
    x = check_weyl(x, "x")
    y = check_weyl(y, "y")
    if x.size != y.size:
        raise ValueError(f"x and y must have the same length, got {x.size} and {y.size}")
    g = config.geometry
    labeling = labeling or label_clusters(config)
    src = [labeling.root_of(0, int(xi)) for xi in x]
    dst = [labeling.root_of(g.n, int(yi)) for yi in y]
    return labeling, src, dst


def check_con_ni(config: EdgeConfig, x: Sequence[int], y: Sequence[int],
                 labeling: ClusterLabeling | None = None) -> ConNI:
    """Membership of ``config`` in the connection and non-intersection events.

    Connection: every ``(0, x_i)`` is connected to ``(n, y_i)``.
    Non-intersection: the clusters of the ``(0, x_i)`` are pairwise distinct.
    """
    _, src, dst = _source_target_roots(config, labeling, x, y)
    in_con = all(s == d for s, d in zip(src, dst))
    in_ni = len(set(src)) == len(src)
    return ConNI(in_con, in_ni)


@dataclass(frozen=True)
class EnvelopePair:
    """Upper/lower envelopes, arrays of shape ``(r, n + 1)`` indexed by column."""

    upper: np.ndarray
    lower: np.ndarray

    @property
    def r(self) -> int:
        return self.upper.shape[0]

    @property
    def n(self) -> int:
        return self.upper.shape[1] - 1

    def widths(self) -> np.ndarray:
        """``max_k (upper_i(k) - lower_i(k))`` per cluster."""
        return (self.upper - self.lower).max(axis=1)

    def centre(self, k: int) -> np.ndarray:
        return 0.5 * (self.upper[:, k] + self.lower[:, k])


def envelopes_from_coords(coords_per_cluster: Sequence[np.ndarray], n: int) -> EnvelopePair:
    r = len(coords_per_cluster)
    upper = np.full((r, n + 1), np.iinfo(np.int64).min, dtype=np.int64)
    lower = np.full((r, n + 1), np.iinfo(np.int64).max, dtype=np.int64)
    for i, c in enumerate(coords_per_cluster):
        c = np.asarray(c)
        inside = (c[:, 0] >= 0) & (c[:, 0] <= n)
        cols, rows = c[inside, 0], c[inside, 1]
        np.maximum.at(upper[i], cols, rows)
        np.minimum.at(lower[i], cols, rows)
        missing = np.flatnonzero(upper[i] == np.iinfo(np.int64).min)
        if missing.size:
            raise ValueError(f"cluster {i} misses columns {missing.tolist()}; configuration is not in Con")
    return EnvelopePair(upper, lower)


def extract_envelopes(config: EdgeConfig, x: Sequence[int], y: Sequence[int],
                      labeling: ClusterLabeling | None = None) -> EnvelopePair:
    labeling, src, _ = _source_target_roots(config, labeling, x, y)
    return envelopes_from_coords([labeling.cluster_coords(s) for s in src], config.geometry.n)


def _canonical_edge(a, b):
    a, b = tuple(int(t) for t in a), tuple(int(t) for t in b)
    return (a, b) if a <= b else (b, a)


def exterior_boundary(cluster: Iterable[tuple[int, int]],
                      geometry: BoxGeometry | None = None) -> frozenset:
    """Edges with exactly one endpoint in ``cluster``.

    These are the edges that must be closed for ``cluster`` to be a whole open
    cluster. With ``geometry`` given, edges leaving the box are dropped.
    """
    verts = {tuple(int(t) for t in v) for v in cluster}
    out = set()
    for (a, b) in verts:
        for nb in ((a + 1, b), (a - 1, b), (a, b + 1), (a, b - 1)):
            if nb in verts:
                continue
            if geometry is not None and not geometry.contains(*nb):
                continue
            out.add(_canonical_edge((a, b), nb))
    return frozenset(out)


def internal_edges(cluster: Iterable[tuple[int, int]]) -> frozenset:
    """Lattice edges with both endpoints in ``cluster``."""
    verts = {tuple(int(t) for t in v) for v in cluster}
    return frozenset(_canonical_edge(v, (v[0] + dx, v[1] + dy))
                     for v in verts for dx, dy in ((1, 0), (0, 1))
                     if (v[0] + dx, v[1] + dy) in verts)


def edge_indices(geometry: BoxGeometry, edges: Iterable) -> np.ndarray:
    return np.array(sorted(geometry.edge_between(a, b) for a, b in edges), dtype=np.int64)
