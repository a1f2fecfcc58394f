"""Brownian watermelon: marginal density, reference samplers and KS distances.

At time ``t`` the ordered heights of ``r`` non-intersecting standard bridges
have density proportional to ``s**(-r*r/2) Delta(z)**2 exp(-|z|**2 / (2 s))`` on
the Weyl chamber, with ``s = t (1 - t)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, stats
from scipy.special import kolmogi

from .rng import stream


def vandermonde(z) -> float:
    """``prod_{i<j} (z_j - z_i)``; the empty product is 1."""
    z = np.asarray(z, dtype=float)
    out = 1.0
    for i in range(z.size):
        for j in range(i + 1, z.size):
            out *= z[j] - z[i]
    return out


def _check_t(t: float):
    if not 0 < t < 1:
        raise ValueError(f"t must lie in (0, 1), got {t}")


def _unnormalized(r: int, t: float, z: np.ndarray) -> float:
    s = t * (1 - t)
    return vandermonde(z) ** 2 * math.exp(-float(np.dot(z, z)) / (2 * s)) * s ** (-r * r / 2)


@lru_cache(maxsize=None)
def normalizer(r: int, t: float) -> float:
    """Integral of the unnormalized density over the Weyl chamber (adaptive quadrature).

    The integrand is symmetric, so the integral over ``R^r`` is divided by ``r!``.
    """
    _check_t(t)
    s = t * (1 - t)
    lim = 12 * math.sqrt(s)
    f = lambda *z: _unnormalized(r, t, np.asarray(z))
    val, _ = integrate.nquad(f, [(-lim, lim)] * r, opts={"epsabs": 1e-13, "epsrel": 1e-11, "limit": 200})
    return val / math.factorial(r)


def marginal_density(r: int, t: float, z) -> float:
    """Normalized density of the ordered heights at time ``t``; zero outside W."""
    _check_t(t)
    z = np.asarray(z, dtype=float)
    if z.shape != (r,):
        raise ValueError(f"z must have length {r}")
    if np.any(np.diff(z) <= 0):
        return 0.0
    return _unnormalized(r, t, z) / normalizer(r, t)


@lru_cache(maxsize=32)
def _coordinate_table(r: int, t: float, i: int, points: int = 4001):
    """Tabulated CDF of the ``i``-th ordered coordinate, by integrating the density."""
    s = t * (1 - t)
    lim = (4 + 2 * math.sqrt(r)) * math.sqrt(s)
    grid = np.linspace(-lim, lim, points)
    if r == 1:
        pdf = np.array([marginal_density(1, t, [a]) for a in grid])
    else:
        others = [j for j in range(r) if j != i]

        def pdf_at(a):
            def f(*rest):
                z = np.empty(r)
                z[i] = a
                z[others] = rest
                return marginal_density(r, t, z)
            # integrate the other coordinates over their ordered ranges
            ranges = []
            for j in others:
                lo = a if j > i else -lim
                hi = lim if j > i else a
                ranges.append((lo, hi))
            return integrate.nquad(f, ranges, opts={"epsabs": 1e-10, "limit": 100})[0] if ranges else 0.0
        pdf = np.array([pdf_at(a) for a in grid])
    cdf = integrate.cumulative_trapezoid(pdf, grid, initial=0.0)
    cdf /= cdf[-1]
    return grid, cdf


def coordinate_cdf(r: int, t: float, i: int, points: int = 4001):
    """CDF of ordered coordinate ``i`` (0-based) at time ``t``, as a callable."""
    _check_t(t)
    if not 0 <= i < r:
        raise ValueError(f"coordinate {i} outside 0..{r - 1}")
    grid, cdf = _coordinate_table(r, t, i, points)
    return lambda a: np.interp(a, grid, cdf, left=0.0, right=1.0)


@dataclass
class WatermelonSamples:
    """``heights[k, i, j]``: sample ``k``, curve ``i``, grid time ``grid[j]``."""

    grid: np.ndarray
    heights: np.ndarray
    method: str
    offset: float = 0.0
    attempts: int | None = None

    def at(self, t: float) -> np.ndarray:
        j = int(np.argmin(np.abs(self.grid - t)))
        if not math.isclose(self.grid[j], t, abs_tol=1e-12):
            raise ValueError(f"time {t} is not a grid point")
        return self.heights[:, :, j]


class RejectionBudgetExceeded(RuntimeError):
    pass


def _brownian_bridges(rng, shape, m):
    dt = 1.0 / m
    steps = rng.standard_normal(shape + (m,)) * math.sqrt(dt)
    b = np.concatenate([np.zeros(shape + (1,)), np.cumsum(steps, axis=-1)], axis=-1)
    t = np.linspace(0, 1, m + 1)
    return b - t * b[..., -1:]


def _matrix_bridge(r, m, N, rng):
    # Hermitian Brownian bridge: diagonal variance t, off-diagonal real/imag variance t/2
    t = np.linspace(0, 1, m + 1)
    diag = _brownian_bridges(rng, (N, r), m)
    re = _brownian_bridges(rng, (N, r, r), m) / math.sqrt(2)
    im = _brownian_bridges(rng, (N, r, r), m) / math.sqrt(2)
    H = np.zeros((N, m + 1, r, r), complex)
    iu = np.triu_indices(r, 1)
    for a, b in zip(*iu):
        H[:, :, a, b] = re[:, a, b] + 1j * im[:, a, b]
        H[:, :, b, a] = re[:, a, b] - 1j * im[:, a, b]
    for a in range(r):
        H[:, :, a, a] = diag[:, a]
    ev = np.linalg.eigvalsh(H)  # ascending, shape (N, m+1, r)
    return t, np.transpose(ev, (0, 2, 1))


def _epsilon_rejection(r, m, N, rng, eps, max_attempts, batch=20000):
    t = np.linspace(0, 1, m + 1)
    start = eps * np.arange(r)
    out = []
    got = 0
    attempts = 0
    while got < N:
        if attempts >= max_attempts:
            rate = got / attempts if attempts else 0.0
            raise RejectionBudgetExceeded(
                f"epsilon-rejection budget exhausted: {got}/{N} after {attempts} attempts (rate {rate:.3g})")
        b = min(batch, max_attempts - attempts)
        paths = _brownian_bridges(rng, (b, r), m) + start[None, :, None]
        ok = np.all(np.diff(paths, axis=1) > 0, axis=(1, 2)) if r > 1 else np.ones(b, bool)
        acc = paths[ok][: N - got]
        out.append(acc)
        got += len(acc)
        attempts += b
    return t, np.concatenate(out), attempts


def sample_watermelon(r: int, m: int, N: int, seed: int, method: str = "matrix-bridge",
                      eps: float = 0.05, max_attempts: int = 20_000_000) -> WatermelonSamples:
    """``N`` watermelons observed on the grid ``0, 1/m, ..., 1``.

    ``epsilon-rejection`` starts and ends the bridges at ``0, eps, ..., (r-1) eps``
    and reports heights shifted by ``-(r-1) eps / 2`` (the recorded offset).
    """
    rng = stream(seed, 0x3E10)
    if method == "matrix-bridge":
        t, h = _matrix_bridge(r, m, N, rng)
        return WatermelonSamples(t, h, method)
    if method == "epsilon-rejection":
        if m < 16:
            raise ValueError("epsilon-rejection needs grid resolution m >= 16")
        t, h, attempts = _epsilon_rejection(r, m, N, rng, eps, max_attempts)
        off = (r - 1) * eps / 2
        return WatermelonSamples(t, h - off, method, off, attempts)
    raise ValueError(f"unknown method {method!r}; use 'matrix-bridge' or 'epsilon-rejection'")


def ks_distance(samples, reference) -> float:
    """Sup distance between the empirical CDF of ``samples`` and ``reference``.

    ``reference`` is either a CDF callable (one-sample) or a second sample.
    """
    a = np.asarray(samples, float).ravel()
    if a.size == 0:
        raise ValueError("empty sample")
    if callable(reference):
        return float(stats.kstest(a, reference).statistic)
    b = np.asarray(reference, float).ravel()
    if b.size == 0:
        raise ValueError("empty reference sample")
    return float(stats.ks_2samp(a, b).statistic)


def ks_threshold(alpha: float, n: int, m: int | None = None) -> float:
    """Asymptotic KS critical value for a one-sample (``m=None``) or two-sample test."""
    c = float(kolmogi(alpha))
    if m is None:
        return c / math.sqrt(n)
    return c * math.sqrt((n + m) / (n * m))


def midpoint_ks(samples: np.ndarray, r: int, t: float = 0.5) -> np.ndarray:
    """Per-coordinate one-sample KS statistics of ordered heights against the exact marginal."""
    return np.array([ks_distance(samples[:, i], coordinate_cdf(r, t, i)) for i in range(r)])
