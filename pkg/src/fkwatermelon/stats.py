"""Small statistical helpers: weighted least squares, binomial errors, autocorrelation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def binomial_se(k: int, N: int) -> float:
    """Standard error of ``k / N``; uses ``1 / N`` as a floor when ``k`` is 0 or ``N``."""
    ph = k / N
    return math.sqrt(max(ph * (1 - ph), 1.0 / N) / N)


@dataclass
class LinearFit:
    coef: np.ndarray
    cov: np.ndarray
    chi2: float
    dof: int
    condition: float

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    @property
    def ill_conditioned(self) -> bool:
        return not np.isfinite(self.condition) or self.condition > 1e10


def weighted_fit(design: np.ndarray, y: np.ndarray, sigma: np.ndarray | None = None,
                 scale_by_chi2: bool = False) -> LinearFit:
    """Least squares ``y ~ design @ coef`` with per-point standard errors ``sigma``.

    The covariance is ``(X^T W X)^-1``; with ``scale_by_chi2`` it is inflated by
    the reduced chi-square when that exceeds 1.
    """
    X = np.asarray(design, float)
    y = np.asarray(y, float)
    s = np.ones_like(y) if sigma is None else np.asarray(sigma, float)
    Xw = X / s[:, None]
    yw = y / s
    coef, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
    A = Xw.T @ Xw
    cond = float(np.linalg.cond(A))
    cov = np.linalg.pinv(A)
    resid = yw - Xw @ coef
    chi2 = float(resid @ resid)
    dof = len(y) - X.shape[1]
    if scale_by_chi2 and dof > 0 and chi2 / dof > 1:
        cov = cov * (chi2 / dof)
    return LinearFit(coef, cov, chi2, dof, cond)


def integrated_autocorr_time(x: np.ndarray, c: float = 5.0) -> float:
    """Integrated autocorrelation time with Sokal's automatic window."""
    x = np.asarray(x, float)
    n = x.size
    if n < 4 or np.var(x) == 0:
        return 1.0
    f = np.fft.rfft(x - x.mean(), n=2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n]
    acf /= acf[0]
    tau = 1.0
    for m in range(1, n):
        tau += 2 * acf[m]
        if m >= c * tau:
            break
    return max(tau, 1.0)


def strictly_decreasing(values) -> bool:
    v = np.asarray(values, float)
    return bool(np.all(np.diff(v) < 0))


def non_increasing(values) -> bool:
    v = np.asarray(values, float)
    return bool(np.all(np.diff(v) <= 0))
