"""Directed and synchronized random walks, Weyl-chamber kernels and bridge samplers.

A directed walk has i.i.d. increments ``(theta, x)`` with ``theta >= 1`` a time
step and ``x`` a spatial step whose conditional mean given ``theta`` is zero.
In a synchronized system the r walks share ``theta`` and draw their spatial
steps independently given it. Renewal times are the common partial sums of
``theta``; non-intersection is checked at renewal times, which for walks with
common renewal times is the same as for their linear interpolations.
"""
from __future__ import annotations

import hashlib
import itertools
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numba
import numpy as np
import sympy

from .geometry import ConeParams
from .lattice import check_weyl
from .rng import stream

DP_MAX_CELLS = 20_000_000


# ---------------------------------------------------------------------------
# increment distributions

@dataclass(frozen=True)
class IncrementDist:
    """Finite increment law ``{(theta, x): prob}``."""

    table: tuple = field(default=())
    name: str = "custom"

    def __post_init__(self):
        table = tuple(sorted((int(t), int(x), p) for t, x, p in self.table))
        if not table:
            raise ValueError("empty increment table")
        if any(t < 1 for t, _, _ in table):
            raise ValueError("time steps must be >= 1")
        if any(p < 0 for _, _, p in table):
            raise ValueError("negative probability")
        total = sum(p for _, _, p in table)
        if not math.isclose(float(total), 1.0, abs_tol=1e-12):
            raise ValueError(f"probabilities sum to {float(total)}, not 1")
        for theta, _, xs, ps in self._groups(table):
            mean = sum(x * p for x, p in zip(xs, ps))
            if not math.isclose(float(mean), 0.0, abs_tol=1e-12):
                raise ValueError(f"spatial step is not centred given theta={theta} (mean {float(mean)})")
        object.__setattr__(self, "table", table)

    @staticmethod
    def _groups(table):
        out = []
        for theta, rows in itertools.groupby(table, key=lambda row: row[0]):
            rows = list(rows)
            pt = sum(p for _, _, p in rows)
            out.append((theta, pt, [x for _, x, _ in rows], [p / pt for _, _, p in rows]))
        return out

    @classmethod
    def from_dict(cls, probs: dict, name: str = "custom") -> IncrementDist:
        return cls(tuple((t, x, p) for (t, x), p in probs.items()), name)

    @classmethod
    def simple(cls) -> IncrementDist:
        """``theta = 1``, spatial step +-1 with probability 1/2 each (exact rationals)."""
        h = Fraction(1, 2)
        return cls(((1, -1, h), (1, 1, h)), "simple")

    @classmethod
    def lazy(cls, a: float) -> IncrementDist:
        """``theta = 1``, spatial step +-1 with probability ``a`` each, else 0."""
        if not 0 < a <= 0.5:
            raise ValueError(f"lazy walk needs 0 < a <= 1/2, got {a}")
        if a == 0.5:
            return cls(((1, -1, 0.5), (1, 1, 0.5)), "lazy(0.5)")
        return cls(((1, -1, a), (1, 0, 1 - 2 * a), (1, 1, a)), f"lazy({a})")

    @classmethod
    def parse(cls, text: str) -> IncrementDist:
        """``simple``, ``lazy:A`` or ``table:theta,x,p;theta,x,p;...``."""
        kind, _, arg = text.partition(":")
        if kind == "simple" and not arg:
            return cls.simple()
        if kind == "lazy":
            return cls.lazy(float(arg))
        if kind == "table":
            rows = [tuple(part.split(",")) for part in arg.split(";") if part]
            return cls(tuple(sorted((int(t), int(x), float(p)) for t, x, p in rows)), "table")
        raise ValueError(f"unknown increment distribution {text!r}; use simple, lazy:A or table:...")

    @property
    def groups(self):
        """``[(theta, P(theta), xs, P(x | theta)), ...]``."""
        return self._groups(self.table)

    @property
    def exact(self) -> bool:
        return all(isinstance(p, (Fraction, int)) for _, _, p in self.table)

    @property
    def unit_time(self) -> bool:
        return all(t == 1 for t, _, _ in self.table)

    @property
    def max_theta(self) -> int:
        return max(t for t, _, _ in self.table)

    @property
    def max_step(self) -> int:
        return max(abs(x) for _, x, _ in self.table)

    def fits_cone(self, cone: ConeParams) -> bool:
        """Every increment lies in the forward cone of the origin."""
        a, b = cone.ratio
        return all(a * t >= b * abs(x) for t, x, _ in self.table)

    def variance_rate(self) -> float:
        """Spatial variance per unit time, ``E[x^2] / E[theta]``."""
        return float(sum(x * x * p for _, x, p in self.table) / sum(t * p for t, _, p in self.table))

    def key(self) -> str:
        return ";".join(f"{t},{x},{float(p)!r}" for t, x, p in self.table)


# ---------------------------------------------------------------------------
# walk systems

@dataclass
class WalkSystem:
    """``r`` trajectories observed at their renewal times.

    ``times`` and ``heights`` have shape ``(r, m + 1)``; a synchronized system
    has identical rows in ``times``.
    """

    times: np.ndarray
    heights: np.ndarray
    synchronized: bool = True

    @property
    def r(self) -> int:
        return self.heights.shape[0]

    def gaps(self) -> np.ndarray:
        """Minimum consecutive spacing at every common time (``inf`` for r = 1)."""
        if self.r == 1:
            return np.full(self.heights.shape[1], np.inf)
        return np.diff(self.heights, axis=0).min(axis=0)

    def in_weyl(self) -> bool:
        if not self.synchronized:
            raise ValueError("Weyl chamber membership needs a synchronized system")
        return bool(np.all(self.gaps() > 0))

    def hits(self, n: int, y) -> bool:
        t = self.times[0]
        idx = np.flatnonzero(t == n)
        return idx.size == 1 and bool(np.all(self.heights[:, idx[0]] == np.asarray(y)))

    def to_json(self) -> dict:
        return {"columns": self.times[0].tolist(), "heights": self.heights.T.tolist()}


def sample_system(dist: IncrementDist, r: int, start, steps: int, seed: int,
                  synchronized: bool = True, stream_id: int = 0) -> WalkSystem:
    """``steps`` increments for each of ``r`` walks started at column 0, heights ``start``."""
    start = np.asarray(start, np.int64)
    if start.shape != (r,):
        raise ValueError(f"start must have length r={r}")
    rng = stream(seed, 0x57A1, stream_id)
    thetas = np.array([g[0] for g in dist.groups])
    pth = np.array([float(g[1]) for g in dist.groups])
    n_walk_theta = 1 if synchronized else r
    th_idx = rng.choice(len(thetas), size=(n_walk_theta, steps), p=pth)
    xs = np.empty((r, steps), np.int64)
    for gi, (theta, _, xvals, px) in enumerate(dist.groups):
        for i in range(r):
            sel = th_idx[0 if synchronized else i] == gi
            xs[i, sel] = rng.choice(np.asarray(xvals), size=int(sel.sum()), p=np.asarray(px, float))
    th = np.broadcast_to(thetas[th_idx], (r, steps))
    times = np.concatenate([np.zeros((r, 1), np.int64), np.cumsum(th, axis=1)], axis=1)
    heights = np.concatenate([start[:, None], start[:, None] + np.cumsum(xs, axis=1)], axis=1)
    return WalkSystem(times, heights, synchronized)


# ---------------------------------------------------------------------------
# Karlin-McGregor

def single_path_count(n: int, dx: int) -> int:
    """Number of +-1 paths of length ``n`` with displacement ``dx``."""
    if (n + dx) % 2 or abs(dx) > n:
        return 0
    return math.comb(n, (n + dx) // 2)


def km_bridge_count(r: int, x, y, n: int) -> tuple[int, Fraction]:
    """Non-intersecting +-1 bridge count from ``x`` to ``y`` in ``n`` steps.

    Returns ``(count, probability)`` with probability ``count / 2**(r n)``.
    The determinant formula needs all starts of one parity and all ends of one
    parity (otherwise walks can swap without meeting at an integer time).
    """
    x = check_weyl(x, "x")
    y = check_weyl(y, "y")
    if x.size != r or y.size != r:
        raise ValueError(f"x and y must have length r={r}")
    if len({int(v) % 2 for v in x}) > 1 or len({int(v) % 2 for v in y}) > 1:
        raise ValueError("Karlin-McGregor counting needs all starts (and all ends) of the same parity")
    if n < 0:
        raise ValueError("n must be >= 0")
    if (n + int(y[0]) - int(x[0])) % 2:
        return 0, Fraction(0)
    m = sympy.Matrix(r, r, lambda i, j: single_path_count(n, int(y[j] - x[i])))
    count = int(m.det(method="bareiss"))
    return count, Fraction(count, 2 ** (r * n))


def brute_force_bridge_count(r: int, x, y, n: int) -> int:
    """Exhaustive count over all ``2**(r n)`` step sequences (tiny cases only)."""
    x = np.asarray(x)
    y = np.asarray(y)
    total = 0
    paths = np.array(list(itertools.product((-1, 1), repeat=n)), np.int64).reshape(-1, n)
    pos = x[:, None, None] + np.concatenate([np.zeros((len(paths), 1), np.int64), np.cumsum(paths, 1)], 1)[None]
    ends = [np.flatnonzero(pos[i][:, -1] == y[i]) for i in range(r)]
    for combo in itertools.product(*ends):
        traj = np.stack([pos[i][c] for i, c in enumerate(combo)])
        if np.all(np.diff(traj, axis=0) > 0):
            total += 1
    return total


# ---------------------------------------------------------------------------
# Weyl-chamber dynamic programming on a dense grid [-H, H]^r

def _shift(arr: np.ndarray, s: int, axis: int) -> np.ndarray:
    """``out[i] = arr[i - s]`` along ``axis`` with zero fill."""
    out = np.zeros_like(arr)
    if s == 0:
        out[...] = arr
        return out
    n = arr.shape[axis]
    if abs(s) >= n:
        return out
    src = [slice(None)] * arr.ndim
    dst = [slice(None)] * arr.ndim
    if s > 0:
        src[axis] = slice(0, n - s)
        dst[axis] = slice(s, n)
    else:
        src[axis] = slice(-s, n)
        dst[axis] = slice(0, n + s)
    out[tuple(dst)] = arr[tuple(src)]
    return out


def weyl_mask(r: int, H: int) -> np.ndarray:
    """Dense boolean mask of strictly increasing points of ``[-H, H]^r``."""
    axes = np.ogrid[tuple(slice(-H, H + 1) for _ in range(r))]
    mask = np.ones((2 * H + 1,) * r, bool)
    for i in range(r - 1):
        mask &= axes[i] < axes[i + 1]
    return mask


class WeylGrid:
    """Transition machinery of a synchronized system killed on leaving W."""

    def __init__(self, dist: IncrementDist, r: int, H: int, exact: bool | None = None):
        cells = (2 * H + 1) ** r
        if cells > DP_MAX_CELLS:
            raise ValueError(f"state space of {cells} cells exceeds the budget {DP_MAX_CELLS}")
        self.dist, self.r, self.H = dist, r, H
        self.exact = dist.exact if exact is None else exact
        self.dtype = object if self.exact else np.float64
        self.mask = weyl_mask(r, H)
        conv = (lambda p: p) if self.exact else float
        self.groups = [(t, conv(pt), xs, [conv(p) for p in px]) for t, pt, xs, px in dist.groups]

    def zeros(self) -> np.ndarray:
        z = np.zeros(self.mask.shape, dtype=self.dtype)
        if self.exact:
            z[...] = Fraction(0)
        return z

    def index(self, z) -> tuple:
        z = np.asarray(z)
        if np.any(np.abs(z) > self.H):
            raise ValueError(f"point {z.tolist()} outside the grid [-{self.H}, {self.H}]")
        return tuple(int(v) + self.H for v in z)

    def delta(self, z) -> np.ndarray:
        a = self.zeros()
        a[self.index(z)] = Fraction(1) if self.exact else 1.0
        return a

    def step(self, arr: np.ndarray, direction: int):
        """Yield ``(theta, contribution)``; forward pushes mass, backward pulls values."""
        for theta, pt, xs, px in self.groups:
            tmp = arr
            for ax in range(self.r):
                acc = None
                for xv, pv in zip(xs, px):
                    term = _shift(tmp, direction * xv, ax) * pv
                    acc = term if acc is None else acc + term
                tmp = acc
            tmp = tmp * pt
            tmp[~self.mask] = 0
            yield theta, tmp

    def total(self, arr: np.ndarray):
        return arr.sum() if not self.exact else sum(arr.ravel().tolist(), Fraction(0))


def default_height(n: int, x=(), y=()) -> int:
    """Grid half-height ``6 sqrt(n)`` widened to contain the endpoints."""
    ext = max([abs(int(v)) for v in list(x) + list(y)] + [0])
    return int(math.ceil(6 * math.sqrt(max(n, 1)))) + ext + 2


@dataclass
class ForwardKernel:
    """``layers[t][z] = P(renewal at t with heights z, ordered at all earlier renewals)``."""

    grid: WeylGrid
    layers: list
    leaked: float

    def at(self, t: int, y) -> float:
        return self.layers[t][self.grid.index(y)]


def weyl_forward(dist: IncrementDist, r: int, x, n: int, H: int | None = None,
                 exact: bool | None = None) -> ForwardKernel:
    x = check_weyl(x, "x")
    H = default_height(n, x) if H is None else H
    grid = WeylGrid(dist, r, H, exact)
    layers = [grid.delta(x)] + [grid.zeros() for _ in range(n)]
    leave = _leave_probability(grid)
    leaked = 0.0
    for t in range(n):
        cur = layers[t]
        for theta, contrib in grid.step(cur, +1):
            if t + theta <= n:
                layers[t + theta] = layers[t + theta] + contrib
        # killing on W is part of the kernel; only mass pushed off the grid is a leak
        leaked += float((np.asarray(cur, float) * leave).sum())
    return ForwardKernel(grid, layers, leaked)


def dp_cache_path(cache_dir, dist: IncrementDist, r: int, x, n: int, H: int) -> Path:
    """Cache file for a float forward table, keyed by ``(dist hash, r, n, H)`` and the start."""
    h = hashlib.sha256(dist.key().encode()).hexdigest()[:16]
    xs = "_".join(str(int(v)) for v in x)
    return Path(cache_dir) / f"weyl-{h}-r{r}-n{n}-H{H}-x{xs}.npy"


def cached_forward(dist: IncrementDist, r: int, x, n: int, H: int | None = None,
                   cache_dir=None) -> ForwardKernel:
    """Float forward table, loaded from or saved to ``cache_dir`` when given."""
    x = check_weyl(x, "x")
    H = default_height(n, x) if H is None else H
    if cache_dir is None:
        return weyl_forward(dist, r, x, n, H, exact=False)
    path = dp_cache_path(cache_dir, dist, r, x, n, H)
    grid = WeylGrid(dist, r, H, exact=False)
    if path.exists():
        data = np.load(path)
        return ForwardKernel(grid, list(data[:-1]), float(data[-1].flat[0]))
    fk = weyl_forward(dist, r, x, n, H, exact=False)
    path.parent.mkdir(parents=True, exist_ok=True)
    tail = np.full(grid.mask.shape, fk.leaked)
    tmp = path.with_suffix(".tmp.npy")
    np.save(tmp, np.stack(fk.layers + [tail]))
    os.replace(tmp, path)
    return fk


def _leave_probability(grid: WeylGrid) -> np.ndarray:
    """Probability that one step from each cell leaves ``[-H, H]^r``."""
    ones = np.ones(grid.mask.shape)
    total = np.zeros(grid.mask.shape)
    for _, pt, xs, px in grid.groups:
        stay = np.ones_like(ones)
        for ax in range(grid.r):
            s = np.zeros_like(ones)
            for xv, pv in zip(xs, px):
                s += _shift(ones, -xv, ax) * float(pv)
            stay = stay * s
        total += float(pt) * (1 - stay)
    return total


def dp_weyl_kernel(dist: IncrementDist, r: int, x, y, n: int, H: int | None = None,
                   exact: bool | None = None):
    """``P_x[ordered at all renewals up to n, renewal at time n at heights y]``."""
    x = check_weyl(x, "x")
    y = check_weyl(y, "y")
    if n == 0:
        one = Fraction(1) if (dist.exact if exact is None else exact) else 1.0
        return one if np.array_equal(x, y) else one * 0
    H = default_height(n, x, y) if H is None else H
    if np.any(np.abs(y) > H):
        return Fraction(0) if (dist.exact if exact is None else exact) else 0.0
    return weyl_forward(dist, r, x, n, H, exact).at(n, y)


class BackwardKernel:
    """``B_m(z) = P_z[ordered at all renewals, renewal at time m at heights y]``.

    Only every ``stride``-th layer is stored; :meth:`layers_desc` regenerates
    the others on demand, newest first.
    """

    def __init__(self, dist: IncrementDist, r: int, y, n: int, H: int, stride: int | None = None):
        self.grid = WeylGrid(dist, r, H, exact=False)
        self.y, self.n = check_weyl(y, "y"), n
        self.theta_max = dist.max_theta
        cells = self.grid.mask.size
        full_ok = (n + 1) * cells * 8 <= 600_000_000
        self.stride = (n + 1) if (stride is None and full_ok) else (stride or max(int(math.sqrt(n)), self.theta_max))
        if self.stride < n + 1 and not dist.unit_time:
            raise ValueError("checkpointed backward tables need unit time steps")
        self.checkpoints = {}
        layers = [self.grid.delta(self.y)]
        self.checkpoints[0] = layers[0]
        self._full = None
        for m in range(1, n + 1):
            layers.append(self._next(layers, m))
            if m % self.stride == 0:
                self.checkpoints[m] = layers[-1]
            if len(layers) > self.theta_max + 1 and self.stride < n + 1:
                layers.pop(0)
        if self.stride >= n + 1:
            self._full = layers

    def _next(self, layers, m):
        new = self.grid.zeros()
        for _, contrib in self._pull(layers, m):
            new += contrib
        return new

    def _pull(self, layers, m):
        # layers[-1] is B_{m-1}; B_{m-theta} is layers[-theta]
        for theta, pt, xs, px in self.grid.groups:
            if theta > m or theta > len(layers):
                continue
            src = layers[-theta]
            tmp = src
            for ax in range(self.grid.r):
                acc = None
                for xv, pv in zip(xs, px):
                    term = _shift(tmp, -xv, ax) * pv
                    acc = term if acc is None else acc + term
                tmp = acc
            tmp = tmp * pt
            tmp[~self.grid.mask] = 0
            yield theta, tmp

    def layer(self, m: int) -> np.ndarray:
        if self._full is not None:
            return self._full[m]
        base = (m // self.stride) * self.stride
        layers = [self.checkpoints[base]]
        for k in range(base + 1, m + 1):
            layers.append(self._next(layers, k))
        return layers[-1]

    def layers_desc(self):
        """Yield ``(m, B_m)`` for ``m = n, n-1, ..., 0``."""
        if self._full is not None:
            for m in range(self.n, -1, -1):
                yield m, self._full[m]
            return
        top = (self.n // self.stride) * self.stride
        for base in range(top, -1, -self.stride):
            layers = [self.checkpoints[base]]
            for k in range(base + 1, min(base + self.stride, self.n + 1)):
                layers.append(self._next(layers[-1:], k))
            for j in range(len(layers) - 1, -1, -1):
                yield base + j, layers[j]


# ---------------------------------------------------------------------------
# conditioned bridges

class SamplerBudgetExceeded(RuntimeError):
    def __init__(self, accepted: int, attempts: int, wanted: int):
        rate = accepted / attempts if attempts else 0.0
        super().__init__(f"rejection budget exhausted: {accepted}/{wanted} accepted after "
                         f"{attempts} attempts (acceptance rate {rate:.3g})")
        self.accepted, self.attempts, self.rate = accepted, attempts, rate


@dataclass
class BridgeSamples:
    """``N`` conditioned systems with unit time steps: heights ``(N, r, n + 1)``."""

    heights: np.ndarray
    attempts: int | None = None

    @property
    def n(self) -> int:
        return self.heights.shape[2] - 1

    def system(self, s: int) -> WalkSystem:
        r = self.heights.shape[1]
        t = np.broadcast_to(np.arange(self.n + 1), (r, self.n + 1)).copy()
        return WalkSystem(t, self.heights[s].copy(), True)

    def min_gaps(self) -> np.ndarray:
        """Per sample, per time minimum spacing, shape ``(N, n + 1)``."""
        if self.heights.shape[1] == 1:
            return np.full((self.heights.shape[0], self.n + 1), np.inf)
        return np.diff(self.heights, axis=1).min(axis=1)


def _rejection_bridges(dist, r, x, y, n, N, seed, max_attempts, batch=20000):
    rng = stream(seed, 0xB1D6E)
    groups = dist.groups
    if not dist.unit_time:
        raise ValueError("rejection bridges are implemented for unit time steps")
    _, _, xs, px = groups[0]
    xs = np.asarray(xs)
    px = np.asarray(px, float)
    out = []
    attempts = 0
    got = 0
    while got < N:
        if attempts >= max_attempts:
            raise SamplerBudgetExceeded(got, attempts, N)
        b = min(batch, max_attempts - attempts)
        steps = xs[rng.choice(len(xs), size=(b, r, n), p=px)]
        paths = np.concatenate([np.broadcast_to(x[None, :, None], (b, r, 1)),
                                x[None, :, None] + np.cumsum(steps, axis=2)], axis=2)
        ok = np.all(paths[:, :, -1] == y[None, :], axis=1)
        if r > 1:
            ok &= np.all(np.diff(paths, axis=1) > 0, axis=(1, 2))
        acc = paths[ok]
        out.append(acc[: N - got])
        got += min(len(acc), N - got)
        attempts += b
    return BridgeSamples(np.concatenate(out), attempts)


def _dp_backward_bridges(dist, r, x, y, n, N, seed, H):
    if not dist.unit_time:
        raise ValueError("dp-backward sampling is implemented for unit time steps")
    H = default_height(n, x, y) if H is None else H
    bk = BackwardKernel(dist, r, y, n, H)
    grid = bk.grid
    _, _, xs, px = grid.groups[0]
    offsets = np.array(list(itertools.product(xs, repeat=r)), np.int64)
    weights = np.prod(np.array(list(itertools.product(px, repeat=r)), float), axis=1)
    rng = stream(seed, 0xDB)
    heights = np.empty((N, r, n + 1), np.int64)
    z = np.broadcast_to(x, (N, r)).copy()
    heights[:, :, 0] = z
    it = bk.layers_desc()
    m_top, top = next(it)
    if top[grid.index(x)] <= 0:
        raise ValueError(f"bridge from {x.tolist()} to {y.tolist()} in {n} steps has zero probability")
    for t, (m, layer) in enumerate(it):
        # choose the step from time t to t + 1 with remaining n - t - 1 = m
        cand = z[:, None, :] + offsets[None, :, :]
        inside = np.all(np.abs(cand) <= H, axis=2)
        idx = tuple(np.clip(cand[..., i] + H, 0, 2 * H) for i in range(r))
        w = np.where(inside, layer[idx], 0.0) * weights[None, :]
        cw = np.cumsum(w, axis=1)
        u = rng.random(N) * cw[:, -1]
        choice = (cw < u[:, None]).sum(axis=1)
        z = cand[np.arange(N), np.minimum(choice, len(offsets) - 1)]
        heights[:, :, t + 1] = z
    return BridgeSamples(heights, None)


def sample_conditioned_bridge(dist: IncrementDist, r: int, x, y, n: int, N: int, seed: int,
                              method: str = "dp-backward", H: int | None = None,
                              max_attempts: int = 50_000_000) -> BridgeSamples:
    """``N`` systems from the law of the walk given ordered at all times and ending at ``y``."""
    x = check_weyl(x, "x")
    y = check_weyl(y, "y")
    if x.size != r or y.size != r:
        raise ValueError(f"x and y must have length r={r}")
    if method == "rejection":
        out = _rejection_bridges(dist, r, x, y, n, N, seed, max_attempts)
    elif method == "dp-backward":
        out = _dp_backward_bridges(dist, r, x, y, n, N, seed, H)
    else:
        raise ValueError(f"unknown method {method!r}; use 'rejection' or 'dp-backward'")
    h = out.heights
    if r > 1 and not np.all(np.diff(h, axis=1) > 0):
        raise AssertionError("sampled bridge left the Weyl chamber")
    if not np.all(h[:, :, -1] == y[None, :]):
        raise AssertionError("sampled bridge missed its endpoint")
    return out


# ---------------------------------------------------------------------------
# harmonic function

def _gap_vandermonde(gaps: np.ndarray) -> np.ndarray:
    """Vandermonde of the point with consecutive spacings ``gaps`` (last axis)."""
    z = np.concatenate([np.zeros(gaps.shape[:-1] + (1,)), np.cumsum(gaps, axis=-1)], axis=-1)
    r = z.shape[-1]
    out = np.ones(gaps.shape[:-1])
    for i in range(r):
        for j in range(i + 1, r):
            out = out * (z[..., j] - z[..., i])
    return out


@dataclass
class HarmonicEstimate:
    """Values of the estimated harmonic function on gap vectors ``1..G`` per coordinate."""

    r: int
    G: int
    values: np.ndarray  # shape (G,)*(r-1), index g-1
    iterations: int
    residual: float
    converged: bool
    scale: float

    def __call__(self, z) -> float:
        z = np.asarray(z)
        if self.r == 1:
            return 1.0
        g = np.diff(z)
        if np.any(g <= 0):
            return 0.0
        if np.any(g > self.G):
            raise ValueError(f"gaps {g.tolist()} exceed the estimated range 1..{self.G}")
        return float(self.values[tuple(int(v) - 1 for v in g)])

    def gap_grid(self) -> np.ndarray:
        axes = np.meshgrid(*[np.arange(1, self.G + 1)] * (self.r - 1), indexing="ij")
        return np.stack(axes, axis=-1)

    def delta_grid(self) -> np.ndarray:
        return _gap_vandermonde(self.gap_grid().astype(float))


def _gap_kernel(dist: IncrementDist, r: int):
    """Distribution of the gap increment vector ``(x_{i+1} - x_i)_i`` (unit-time marginal).

    The gap process of a synchronized system only sees the spatial steps, so
    the law of ``theta`` plays no role here.
    """
    table = {}
    for _, pt, xs, px in dist.groups:
        for combo in itertools.product(range(len(xs)), repeat=r):
            steps = np.array([xs[c] for c in combo])
            w = float(pt) * float(np.prod([px[c] for c in combo]))
            key = tuple(np.diff(steps).tolist())
            table[key] = table.get(key, 0.0) + w
    return list(table.items())


def estimate_V(dist: IncrementDist, r: int, G: int, iterations: int = 200_000, tol: float = 1e-10,
               method: str = "iterate") -> HarmonicEstimate:
    """Harmonic function of the system killed on leaving the Weyl chamber.

    Works on gap space (the kernel is translation invariant). Solves
    ``V = K V`` on gaps ``1..G`` with ``V = Delta`` beyond ``G`` as boundary
    data, by damped Jacobi iteration from ``Delta`` or by a sparse direct
    solve, then rescales so that ``V / Delta`` averages to 1 on the band of
    largest gaps.
    """
    if r < 2:
        raise ValueError("the harmonic function is trivial for r = 1")
    kern = _gap_kernel(dist, r)
    d = r - 1
    span = max(max(abs(v) for v in k) for k, _ in kern)
    L = G + span
    # extended grid with gap values -span+1 .. L; index shift so gap g -> g + span - 1
    off = span - 1
    axes = np.meshgrid(*[np.arange(-off, L + 1)] * d, indexing="ij")
    gaps = np.stack(axes, axis=-1).astype(float)
    killed = np.any(gaps <= 0, axis=-1)
    inner = np.all((gaps >= 1) & (gaps <= G), axis=-1)
    delta_ext = np.where(killed, 0.0, _gap_vandermonde(gaps))

    def apply(V):
        out = np.zeros_like(V)
        for k, w in kern:
            src = V
            for ax, s in enumerate(k):
                src = _shift(src, -s, ax)
            out += w * src
        return out

    V = delta_ext.copy()
    resid = np.inf
    it = 0
    if method == "iterate":
        for it in range(1, iterations + 1):
            KV = apply(V)
            new = np.where(inner, KV, V)
            resid = float(np.max(np.abs(new - V)[inner]) / max(np.max(np.abs(V[inner])), 1.0))
            V = 0.5 * (V + new) if it % 2 else new
            if resid < tol:
                break
    elif method == "solve":
        from scipy.sparse import lil_matrix, identity
        from scipy.sparse.linalg import spsolve
        flat_inner = np.flatnonzero(inner.ravel())
        pos = -np.ones(inner.size, np.int64)
        pos[flat_inner] = np.arange(flat_inner.size)
        A = lil_matrix((flat_inner.size, flat_inner.size))
        rhs = np.zeros(flat_inner.size)
        coords = np.array(np.unravel_index(flat_inner, inner.shape)).T
        for row, c in enumerate(coords):
            for k, w in kern:
                tgt = c + np.array(k)
                ti = np.ravel_multi_index(tuple(tgt), inner.shape)
                if pos[ti] >= 0:
                    A[row, pos[ti]] -= w
                else:
                    rhs[row] += w * delta_ext.ravel()[ti]
        A = identity(flat_inner.size, format="csr") + A.tocsr()
        sol = spsolve(A.tocsc(), rhs)
        V = delta_ext.copy().ravel()
        V[flat_inner] = sol
        V = V.reshape(inner.shape)
        resid = float(np.max(np.abs(apply(V) - V)[inner]) / max(np.max(np.abs(V[inner])), 1.0))
        it = 1
    else:
        raise ValueError(f"unknown method {method!r}")
    sl = tuple(slice(off + 1, off + 1 + G) for _ in range(d))
    vals = V[sl]
    delta_in = delta_ext[sl]
    mins = gaps[sl].min(axis=-1)
    band = mins >= max(1, int(0.75 * G))
    scale = float(np.mean(delta_in[band] / vals[band]))
    return HarmonicEstimate(r, G, vals * scale, it, resid, resid < max(tol, 1e-8) * 10, scale)


# ---------------------------------------------------------------------------
# diamonds around walk steps

def _uv(points: np.ndarray, cone: ConeParams):
    a, b = cone.ratio
    return a * points[..., 0] + b * points[..., 1], a * points[..., 0] - b * points[..., 1]


@numba.njit(cache=True)
def _rect_overlap(u_lo, u_hi, v_lo, v_hi, steps_t0, steps_t1):
    """Do rectangles of different walks intersect? Arrays are ``(r, m)``."""
    r, m = u_lo.shape
    for i in range(r):
        for j in range(i + 1, r):
            kb = 0
            for ka in range(m):
                # advance kb to the first piece of j that could overlap piece ka in columns
                while kb < m and steps_t1[j, kb] < steps_t0[i, ka]:
                    kb += 1
                k = kb
                while k < m and steps_t0[j, k] <= steps_t1[i, ka]:
                    if (u_lo[i, ka] <= u_hi[j, k] and u_lo[j, k] <= u_hi[i, ka]
                            and v_lo[i, ka] <= v_hi[j, k] and v_lo[j, k] <= v_hi[i, ka]):
                        return True
                    k += 1
    return False


def nonintdiam_check(system: WalkSystem, cone: ConeParams) -> bool:
    """True iff the unions of step diamonds of different walks are pairwise disjoint.

    In coordinates ``u = a w1 + b w2``, ``v = a w1 - b w2`` (``delta = a/b``)
    the diamond of a step from ``p`` to ``q`` is the rectangle
    ``[u_p, u_q] x [v_p, v_q]``, so overlap tests are exact integer comparisons.
    """
    pts = np.stack([system.times, system.heights], axis=-1)
    u, v = _uv(pts, cone)
    if np.any(u[:, 1:] < u[:, :-1]) or np.any(v[:, 1:] < v[:, :-1]):
        raise ValueError("a step leaves the forward cone")
    return not _rect_overlap(u[:, :-1], u[:, 1:], v[:, :-1], v[:, 1:],
                             system.times[:, :-1].astype(np.int64), system.times[:, 1:].astype(np.int64))


def nonintdiam_raster(system: WalkSystem, cone: ConeParams) -> bool:
    """Reference: rasterize every diamond on a grid fine enough to hit all corners."""
    a, b = cone.ratio
    s = 2 * a * b
    owner = {}
    for i in range(system.r):
        for k in range(system.times.shape[1] - 1):
            p = (system.times[i, k], system.heights[i, k])
            q = (system.times[i, k + 1], system.heights[i, k + 1])
            for c in range(p[0] * s, q[0] * s + 1):
                w1 = Fraction(c, s)
                lo = max(p[1] - Fraction(a, b) * (w1 - p[0]), q[1] - Fraction(a, b) * (q[0] - w1))
                hi = min(p[1] + Fraction(a, b) * (w1 - p[0]), q[1] + Fraction(a, b) * (q[0] - w1))
                for rr in range(math.ceil(lo * s), math.floor(hi * s) + 1):
                    prev = owner.setdefault((c, rr), i)
                    if prev != i:
                        return False
    return True


# ---------------------------------------------------------------------------
# repulsion and confinement statistics

@dataclass
class RepulsionStats:
    n: int
    eps: float
    samples: int
    eta_late: float        # P(eta_n > n^(1-eps))
    last_early: float      # P(last time with gap > n^eps < n - n^(1-eps))
    bulk_small: float      # P(min gap over [n^eps, n - n^eps] <= n^bulk_exp)
    bulk_exp: float


def repulsion_stats(samples: BridgeSamples, eps: float = 0.2, bulk_exp: float = 0.15,
                    bulk_window_exp: float | None = None) -> RepulsionStats:
    """Edge and bulk repulsion frequencies of conditioned systems.

    ``eta`` is the first time all spacings exceed ``n^eps``; the bulk window is
    ``[n^w, n - n^w]`` with ``w = bulk_window_exp`` (default ``eps``).
    """
    n = samples.n
    g = samples.min_gaps()
    thr = n ** eps
    far = g > thr
    N = g.shape[0]
    if np.isinf(g).all():
        return RepulsionStats(n, eps, N, 0.0, 0.0, 0.0, bulk_exp)
    any_far = far.any(axis=1)
    eta = np.where(any_far, far.argmax(axis=1), n + 1)
    last = np.where(any_far, n - far[:, ::-1].argmax(axis=1), -1)
    w = eps if bulk_window_exp is None else bulk_window_exp
    lo, hi = int(math.ceil(n ** w)), int(math.floor(n - n ** w))
    bulk = g[:, lo:hi + 1].min(axis=1) if hi >= lo else np.full(N, np.inf)
    edge = n ** (1 - eps)
    return RepulsionStats(n, eps, N, float(np.mean(eta > edge)), float(np.mean(last < n - edge)),
                          float(np.mean(bulk <= n ** bulk_exp)), bulk_exp)


def non_confinement_count(walk, f, tube: float, horizon: int) -> int:
    """``#{k <= horizon : |S(k) - f(k)| < tube}``."""
    walk = np.asarray(walk, float)[: horizon + 1]
    f = np.asarray(f, float)[: horizon + 1]
    if walk.size < horizon + 1 or f.size < horizon + 1:
        raise ValueError("walk and f must be defined on 0..horizon")
    return int(np.sum(np.abs(walk - f) < tube))


def confinement_tail(horizon: int, tube: float, threshold: float, a: float = 0.5) -> float:
    """Exact ``P[#{k <= horizon : |S_k| < tube} > threshold]`` for a walk from 0.

    Steps are +-1 with probability ``a`` each and 0 otherwise (``a = 1/2`` is the
    simple walk). Dynamic programming over (position, count so far).
    """
    W = horizon
    pos = np.arange(-W, W + 1)
    close = np.abs(pos) < tube
    need = int(math.floor(threshold)) + 1  # count must reach need
    P = np.zeros((2 * W + 1, need + 1))
    P[W, min(int(close[W]), need)] = 1.0
    for _ in range(horizon):
        Q = (1 - 2 * a) * P
        Q[1:] += a * P[:-1]
        Q[:-1] += a * P[1:]
        # count increments where the new position is close; saturate at need
        inc = np.zeros_like(Q)
        inc[close, 1:] = Q[close, :-1]
        inc[close, need] += Q[close, need]
        Q[close] = inc[close]
        P = Q
    return float(P[:, need].sum())
