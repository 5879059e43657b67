"""Numeric kernels on grid likelihood vectors and sample sets.

Grid vectors hold densities at evenly spaced points over [0, 1]. All
functions accept a trailing axis of grid points or samples and reduce over
it, so a batch of candidates can be scored in one call.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtr

EPS = 1e-12
_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _grid(v):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] < 2:
        raise ValueError("grid vectors need at least 2 points")
    return v


def trapz(v):
    """Trapezoid sum with unit spacing: sum of (v[n] + v[n+1]) / 2."""
    v = _grid(v)
    return 0.5 * (v[..., :-1] + v[..., 1:]).sum(axis=-1)


def trapz_physical(v):
    """Trapezoid integral over [0, 1] (spacing 1/(R-1))."""
    v = _grid(v)
    return trapz(v) / (v.shape[-1] - 1)


def _xlogy(p, q):
    # p * log(max(q, EPS)), with p == 0 contributing exactly 0
    return np.where(p > 0, p * np.log(np.maximum(q, EPS)), 0.0)


def discrete_kl(p, q):
    """sum_n p_n (log p_n - log q_n), logs clamped below at EPS."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape[-1] != q.shape[-1]:
        raise ValueError(f"length mismatch: {p.shape[-1]} vs {q.shape[-1]}")
    return (_xlogy(p, p) - _xlogy(p, q)).sum(axis=-1)


def self_entropy(p):
    """Plain-sum entropy -sum p log p (no spacing)."""
    return -_xlogy(np.asarray(p, dtype=np.float64), p).sum(axis=-1)


def cross_entropy(p, q):
    """Plain-sum cross entropy -sum p log q."""
    p = np.asarray(p, dtype=np.float64)
    return -_xlogy(p, np.asarray(q, dtype=np.float64)).sum(axis=-1)


def continuous_entropy(v, physical=False):
    """trapz(-v log v) over the grid; zero entries contribute 0.

    With ``physical=True`` the grid spacing 1/(R-1) is applied, giving the
    differential entropy on [0, 1].
    """
    v = _grid(v)
    integrand = -_xlogy(v, v)
    return trapz_physical(integrand) if physical else trapz(integrand)


def emd_1d(a, b):
    """Wasserstein-1 between equal-size empirical samples (last axis)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] == 0 or b.shape[-1] == 0:
        raise ValueError("emd_1d on an empty sample set")
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"sample sizes differ: {a.shape[-1]} vs {b.shape[-1]}")
    return np.abs(np.sort(a, axis=-1) - np.sort(b, axis=-1)).mean(axis=-1)


def crps_gaussian(y, mu, sigma):
    """Closed-form CRPS of N(mu, sigma^2) at observation y."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    z = (np.asarray(y, dtype=np.float64) - mu) / sigma
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return sigma * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * pdf - _INV_SQRT_PI)


def crps_samples(y, samples):
    """Sample CRPS: mean|s - y| - 0.5 * mean over all pairs |s_i - s_j|.

    ``samples`` has the draws on its last axis; ``y`` broadcasts against the
    leading axes. The pair mean runs over all n^2 ordered pairs.
    """
    s = np.asarray(samples, dtype=np.float64)
    n = s.shape[-1]
    if n < 2:
        raise ValueError("crps_samples needs at least 2 samples")
    y = np.asarray(y, dtype=np.float64)[..., None]
    term1 = np.abs(s - y).mean(axis=-1)
    ss = np.sort(s, axis=-1)
    # sum_{i,j} |s_i - s_j| = 2 * sum_i (2i - n + 1) s_(i)
    weights = 2.0 * np.arange(n) - n + 1.0
    pair_sum = 2.0 * (ss * weights).sum(axis=-1)
    return term1 - 0.5 * pair_sum / (n * n)
