"""Proximal operators under a diagonal metric, plus the threshold-shift bias.

The diagonal metric is a strictly positive vector p; prox_{r,p}(v) minimizes
r(x) + (1/2) ||x - v||^2_{diag(p)^{-1}}.  All operators below have closed
forms except the simplex projection, which needs a scalar bisection.
"""

from __future__ import annotations

import numpy as np

from .densecore import ShapeError, as_vector

R_L1 = "l1"
R_NONNEG = "nonneg"
R_SIMPLEX = "simplex"
R_ZERO = "zero"
R_TAGS = (R_L1, R_NONNEG, R_SIMPLEX, R_ZERO)


class DiagMetric:
    """Strictly positive diagonal metric vector."""

    def __init__(self, p):
        p = as_vector(p)
        if np.any(p <= 0.0):
            raise ValueError("diagonal metric entries must be strictly positive")
        self.p = p

    def __len__(self):
        return self.p.shape[0]


def soft_threshold(v: np.ndarray, tau) -> np.ndarray:
    """sign(v) * max(0, |v| - tau); ties |v| == tau map to exactly 0."""
    return np.sign(v) * np.maximum(0.0, np.abs(v) - tau)


def _metric_vec(metric, n: int) -> np.ndarray:
    p = metric.p if isinstance(metric, DiagMetric) else as_vector(metric)
    if p.shape[0] != n:
        raise ShapeError(f"metric has length {p.shape[0]}, vector has length {n}")
    return p


def prox_l1(v, metric, lam: float) -> np.ndarray:
    """Scaled soft-thresholding: out_i = sign(v_i) * max(0, |v_i| - lam * p_i)."""
    v = as_vector(v)
    if lam < 0.0:
        raise ValueError("lam must be >= 0")
    p = _metric_vec(metric, v.shape[0])
    return soft_threshold(v, lam * p)


def prox_nonneg(v) -> np.ndarray:
    """Projection onto the nonnegative orthant; metric-independent."""
    v = as_vector(v)
    return np.maximum(0.0, v)


def prox_simplex(v, metric, tol: float = 1e-12, max_bisect: int = 200) -> np.ndarray:
    """Metric projection onto the probability simplex.

    Solves out_i = max(0, v_i - xi * p_i) with xi chosen by bisection so the
    coordinates sum to one.
    """
    v = as_vector(v)
    p = _metric_vec(metric, v.shape[0])

    def total(xi):
        return float(np.sum(np.maximum(0.0, v - xi * p)))

    # total(xi) is continuous, nonincreasing; bracket the root
    lo = float(np.min(v / p)) - 1.0 / float(np.min(p))
    hi = float(np.max(v / p))
    while total(lo) < 1.0:
        lo -= 1.0 / float(np.min(p))
    while total(hi) > 1.0:
        hi += 1.0
    for _ in range(max_bisect):
        mid = 0.5 * (lo + hi)
        s = total(mid)
        if abs(s - 1.0) <= tol:
            lo = hi = mid
            break
        if s > 1.0:
            lo = mid
        else:
            hi = mid
    xi = 0.5 * (lo + hi)
    return np.maximum(0.0, v - xi * p)


def prox_composite(r_tag: str, v, metric, lam: float = 0.0) -> np.ndarray:
    """Dispatch on the nonsmooth-part tag; the zero tag is the identity."""
    if r_tag == R_ZERO:
        return as_vector(v).copy()
    if r_tag == R_L1:
        return prox_l1(v, metric, lam)
    if r_tag == R_NONNEG:
        return prox_nonneg(v)
    if r_tag == R_SIMPLEX:
        return prox_simplex(v, metric)
    raise ValueError(f"unknown nonsmooth tag {r_tag!r}")


def threshold_shift(vhat, p_scalar: float, lam: float, theta: float) -> np.ndarray:
    """Bias vector b1 with soft(vhat - b1, lam * p_scalar) == soft(vhat, theta).

    Reproduces a uniform threshold theta through the scaled-soft-threshold
    step: when theta exceeds lam*p the bias eats the difference (capped by
    |vhat_i| so small entries still land at zero); when theta is smaller the
    bias only acts on coordinates that survive the theta-threshold.
    """
    vhat = as_vector(vhat)
    if p_scalar <= 0.0:
        raise ValueError("p_scalar must be > 0")
    if theta < 0.0:
        raise ValueError("theta must be >= 0")
    lp = lam * p_scalar
    if theta == lp:
        return np.zeros_like(vhat)
    s = np.sign(vhat)
    if theta > lp:
        return s * np.minimum(theta - lp, np.abs(vhat))
    return np.where(np.abs(vhat) > theta, s * (theta - lp), 0.0)
