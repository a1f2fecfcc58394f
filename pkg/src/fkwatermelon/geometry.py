"""Cones, diamonds, cone-points, skeletons, synchronization times and gaps.

Points are ``(column, row)`` pairs. With slope ``delta`` the forward cone of
``v`` is ``{w : delta (w1 - v1) >= |w2 - v2|}`` and the backward cone is its
mirror image. A cone-point of a cluster is a vertex whose cluster lies in the
union of its two cones. The cone tests use exact integer arithmetic by writing
``delta = a / b``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ConeParams:
    delta: float = 1.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"cone slope must be positive, got {self.delta}")

    @property
    def ratio(self) -> tuple[int, int]:
        f = Fraction(self.delta).limit_denominator(10 ** 6)
        return f.numerator, f.denominator


def in_forward_cone(v, w, cone: ConeParams) -> bool:
    a, b = cone.ratio
    return a * (w[0] - v[0]) >= b * abs(w[1] - v[1])


def in_backward_cone(v, w, cone: ConeParams) -> bool:
    a, b = cone.ratio
    return a * (v[0] - w[0]) >= b * abs(w[1] - v[1])


def _as_points(cluster) -> np.ndarray:
    pts = np.asarray(list(cluster) if not isinstance(cluster, np.ndarray) else cluster, dtype=np.int64)
    return pts.reshape(-1, 2)


def cone_point_mask_bruteforce(cluster, cone: ConeParams) -> np.ndarray:
    """Quadratic reference: test every vertex against every other vertex."""
    pts = _as_points(cluster)
    a, b = cone.ratio
    dx = pts[None, :, 0] - pts[:, None, 0]
    dy = np.abs(pts[None, :, 1] - pts[:, None, 1])
    ok = (a * dx >= b * dy) | (-a * dx >= b * dy)
    return ok.all(axis=1)


def cone_point_mask(cluster, cone: ConeParams) -> np.ndarray:
    """Boolean mask of the cone-points of ``cluster`` (array of ``(column, row)``).

    For ``w`` right of ``v`` the forward-cone condition splits into
    ``b w2 - a w1 <= b v2 - a v1`` and ``b w2 + a w1 >= b v2 + a v1``, so suffix
    maxima/minima of ``b w2 -+ a w1`` over columns decide it; the backward cone
    uses prefix scans. A cone-point must also be alone in its column.
    """
    pts = _as_points(cluster)
    if pts.shape[0] == 0:
        return np.zeros(0, bool)
    a, b = cone.ratio
    cols = pts[:, 0]
    c0 = cols.min()
    ci = cols - c0
    m = int(ci.max()) + 1
    minus = b * pts[:, 1] - a * pts[:, 0]
    plus = b * pts[:, 1] + a * pts[:, 0]
    big = np.iinfo(np.int64).max // 4
    col_max_minus = np.full(m, -big)
    col_min_minus = np.full(m, big)
    col_max_plus = np.full(m, -big)
    col_min_plus = np.full(m, big)
    np.maximum.at(col_max_minus, ci, minus)
    np.minimum.at(col_min_minus, ci, minus)
    np.maximum.at(col_max_plus, ci, plus)
    np.minimum.at(col_min_plus, ci, plus)
    count = np.bincount(ci, minlength=m)
    # suffix over columns strictly to the right, prefix over columns strictly to the left
    suf_max_minus = np.append(np.maximum.accumulate(col_max_minus[::-1])[::-1][1:], -big)
    suf_min_plus = np.append(np.minimum.accumulate(col_min_plus[::-1])[::-1][1:], big)
    pre_max_plus = np.insert(np.maximum.accumulate(col_max_plus)[:-1], 0, -big)
    pre_min_minus = np.insert(np.minimum.accumulate(col_min_minus)[:-1], 0, big)
    return ((count[ci] == 1)
            & (suf_max_minus[ci] <= minus) & (suf_min_plus[ci] >= plus)
            & (pre_max_plus[ci] <= plus) & (pre_min_minus[ci] >= minus))


def is_cone_point(cluster, v, cone: ConeParams) -> bool:
    pts = _as_points(cluster)
    v = tuple(int(t) for t in v)
    hit = np.flatnonzero((pts[:, 0] == v[0]) & (pts[:, 1] == v[1]))
    if hit.size == 0:
        raise ValueError(f"vertex {v} is not in the cluster")
    return bool(cone_point_mask(pts, cone)[hit[0]])


@dataclass(frozen=True)
class Skeleton:
    """Columns with strictly increasing values and the heights at those columns.

    ``heights`` has shape ``(len(columns),)`` for a single cluster (maximal
    flavor) and ``(len(columns), r)`` for a synchronized skeleton.
    """

    columns: np.ndarray
    heights: np.ndarray
    flavor: str = "maximal"

    def __post_init__(self):
        cols = np.asarray(self.columns, np.int64)
        if np.any(np.diff(cols) <= 0):
            raise ValueError("skeleton columns must be strictly increasing")
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "heights", np.asarray(self.heights, np.int64))

    def __len__(self) -> int:
        return self.columns.size

    @property
    def points(self) -> np.ndarray:
        if self.heights.ndim != 1:
            raise ValueError("points are defined for single-cluster skeletons")
        return np.column_stack([self.columns, self.heights])

    def satisfies_slope(self, cone: ConeParams) -> bool:
        a, b = cone.ratio
        if len(self) < 2 or self.heights.ndim != 1:
            return True
        return bool(np.all(a * np.diff(self.columns) >= b * np.abs(np.diff(self.heights))))

    def to_json(self) -> str:
        h = self.heights if self.heights.ndim == 2 else self.heights[:, None]
        return json.dumps({"columns": self.columns.tolist(), "heights": h.tolist()})

    @classmethod
    def from_json(cls, line: str, flavor: str = "maximal") -> Skeleton:
        obj = json.loads(line)
        h = np.asarray(obj["heights"], np.int64).reshape(len(obj["columns"]), -1)
        if flavor == "maximal":
            h = h[:, 0]
        return cls(np.asarray(obj["columns"], np.int64), h, flavor)


def maximal_decomposition(cluster, cone: ConeParams, x_source=None, y_target=None,
                          check: bool = True) -> Skeleton:
    """All cone-points of ``cluster`` in increasing column order.

    With ``check`` the pieces between consecutive cone-points are verified to
    lie in their diamonds and to reassemble the cluster.
    """
    pts = _as_points(cluster)
    if x_source is not None:
        for v in (x_source, y_target):
            if v is not None and not np.any((pts[:, 0] == v[0]) & (pts[:, 1] == v[1])):
                raise ValueError(f"cluster does not contain {tuple(v)}")
    mask = cone_point_mask(pts, cone)
    sk = pts[mask]
    sk = sk[np.argsort(sk[:, 0])]
    skel = Skeleton(sk[:, 0], sk[:, 1], "maximal")
    if check:
        pieces = decomposition_pieces(pts, skel)
        for j in range(len(skel) - 1):
            lo, hi = skel.points[j], skel.points[j + 1]
            for w in pieces[j + 1]:
                if not (in_forward_cone(lo, w, cone) and in_backward_cone(hi, w, cone)):
                    raise AssertionError(f"vertex {tuple(w)} escapes the diamond {tuple(lo)}-{tuple(hi)}")
        union = {tuple(w) for pc in pieces for w in pc}
        if union != {tuple(w) for w in pts}:
            raise AssertionError("decomposition pieces do not reassemble the cluster")
    return skel


def decomposition_pieces(cluster, skeleton: Skeleton) -> list[np.ndarray]:
    """Split ``cluster`` at its skeleton columns.

    Returns ``len(skeleton) + 1`` pieces: the left end, the pieces between
    consecutive cone-points (both endpoints included), and the right end.
    """
    pts = _as_points(cluster)
    cols = skeleton.columns
    if len(cols) == 0:
        return [pts]
    out = [pts[pts[:, 0] <= cols[0]]]
    for j in range(len(cols) - 1):
        out.append(pts[(pts[:, 0] >= cols[j]) & (pts[:, 0] <= cols[j + 1])])
    out.append(pts[pts[:, 0] >= cols[-1]])
    return out


def synchronized_skeleton(skeletons: Sequence[Skeleton]) -> Skeleton:
    """Columns shared by every skeleton, with the r heights read at those columns."""
    if len(skeletons) == 0:
        raise ValueError("need at least one skeleton")
    common = skeletons[0].columns
    for s in skeletons[1:]:
        common = np.intersect1d(common, s.columns, assume_unique=True)
    heights = np.empty((common.size, len(skeletons)), np.int64)
    for i, s in enumerate(skeletons):
        idx = np.searchsorted(s.columns, common)
        h = s.heights if s.heights.ndim == 1 else s.heights[:, 0]
        heights[:, i] = h[idx]
    if len(skeletons) == 1:
        return Skeleton(common, heights[:, 0], skeletons[0].flavor)
    return Skeleton(common, heights, "synchronized")


def gap(point: Sequence[float]) -> float:
    """Smallest spacing between consecutive coordinates; ``inf`` for one coordinate."""
    z = np.asarray(point)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("gap needs a non-empty vector")
    d = np.diff(z)
    if np.any(d <= 0):
        raise ValueError(f"{z.tolist()} is not strictly increasing")
    if d.size == 0:
        return math.inf
    m = d.min()
    return int(m) if np.issubdtype(z.dtype, np.integer) else float(m)


def diamond_area(p1, p2, delta: float) -> float:
    """Euclidean area of the diamond spanned by ``p1`` (left apex) and ``p2``.

    The diamond is the forward cone of ``p1`` intersected with the backward cone
    of ``p2``: a parallelogram with sides of slopes ``+-delta``. With horizontal
    span ``d`` and vertical offset ``h`` (``|h| <= delta d``) its area is
    ``(delta**2 d**2 - h**2) / (2 delta)``.
    """
    d = p2[0] - p1[0]
    h = p2[1] - p1[1]
    if d <= 0:
        raise ValueError("diamond apexes must have strictly increasing columns")
    if abs(h) > delta * d * (1 + 1e-12):
        raise ValueError(f"{tuple(p2)} is outside the forward cone of {tuple(p1)}")
    return max(delta * delta * d * d - h * h, 0.0) / (2 * delta)


def diamond_lattice_count(p1, p2, delta: float) -> int:
    """Lattice points inside the closed diamond (area oracle)."""
    d = p2[0] - p1[0]
    ks = np.arange(p1[0], p2[0] + 1)
    lo = np.maximum(p1[1] - delta * (ks - p1[0]), p2[1] - delta * (p2[0] - ks))
    hi = np.minimum(p1[1] + delta * (ks - p1[0]), p2[1] + delta * (p2[0] - ks))
    eps = 1e-9
    counts = np.floor(hi + eps) - np.ceil(lo - eps) + 1
    return int(np.clip(counts, 0, None).sum()) if d > 0 else 1


def diamond_volumes(skeleton: Skeleton, delta: float) -> np.ndarray:
    pts = skeleton.points
    return np.array([diamond_area(pts[j], pts[j + 1], delta) for j in range(len(pts) - 1)])
