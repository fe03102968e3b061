"""Robust statistics used by both adaptive thresholds.

Medcouple-based adjusted boxplot whiskers feed an adjusted-outlyingness
score (the inner threshold), and a one-Gaussian density cutoff fitted to
the lower-loss half screens final loss values (the outer threshold).
Quantiles use linear interpolation between order statistics throughout
so the brute-force oracles in the tests agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

AO_DENOM_FLOOR = 1e-12
AO_CAP = 1e6
VARIANCE_FLOOR = 1e-12


class InsufficientDataError(ValueError):
    """Too few observations for a robust estimate."""


def medcouple(values) -> float:
    """Robust skewness in [-1, 1]: the median of the pairwise kernel
    h(x_i, x_j) = ((x_j - m) - (m - x_i)) / (x_j - x_i) over pairs with
    x_i <= m <= x_j. Ties at the median use the standard sign kernel.
    O(n^2); fine at mini-batch scale.
    """
    x = np.sort(np.asarray(values, dtype=np.float64))
    n = x.shape[0]
    if n < 3:
        raise InsufficientDataError(f"medcouple needs >= 3 values, got {n}")
    m = (x[n // 2 - 1] + x[n // 2]) / 2.0 if n % 2 == 0 else x[(n - 1) // 2]
    z = x - m
    lower = z[z <= 0.0]
    upper = z[z >= 0.0][:, None]
    denom = upper - lower
    both_zero = (lower == 0.0) & (upper == 0.0)
    denom[both_zero] = np.inf
    h = (upper + lower) / denom
    ties = int(np.sum(lower == 0.0))
    if ties:
        # sign kernel on the tied block: -1 above the anti-diagonal, 0 on
        # it, +1 below (row a over tied uppers, column b over tied lowers)
        block = np.ones((ties, ties)) - np.eye(ties)
        block -= 2 * np.triu(block)
        h[:ties, -ties:] = np.fliplr(block)
    return float(np.median(h))


def adjusted_whiskers(values):
    """Medcouple-adjusted boxplot whiskers (w1, w2).

    Exponential fence factors follow the adjusted-boxplot convention
    (-4/+3 for right skew, -3/+4 for left skew); each whisker is then
    clamped to the most extreme observation inside its fence.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.shape[0] < 4:
        raise InsufficientDataError(f"whiskers need >= 4 values, got {x.shape[0]}")
    if np.all(x == x[0]):
        return float(x[0]), float(x[0])
    q1, q3 = np.quantile(x, [0.25, 0.75])
    iqr = q3 - q1
    mc = medcouple(x)
    if mc >= 0:
        lo_fence = q1 - 1.5 * np.exp(-4.0 * mc) * iqr
        hi_fence = q3 + 1.5 * np.exp(3.0 * mc) * iqr
    else:
        lo_fence = q1 - 1.5 * np.exp(-3.0 * mc) * iqr
        hi_fence = q3 + 1.5 * np.exp(4.0 * mc) * iqr
    in_lo = x[x >= lo_fence]
    in_hi = x[x <= hi_fence]
    w1 = in_lo.min() if in_lo.size else x.min()
    w2 = in_hi.max() if in_hi.size else x.max()
    return float(w1), float(w2)


def adjusted_outlyingness(values) -> np.ndarray:
    """Per-value outlyingness relative to the adjusted boxplot.

    AO(x) = (x - m) / (w2 - m) above the median, (m - x) / (m - w1)
    below; denominators are floored and scores capped so comparisons
    against a threshold stay total even for degenerate samples.
    """
    x = np.asarray(values, dtype=np.float64)
    m = float(np.median(x))
    w1, w2 = adjusted_whiskers(x)
    up = max(w2 - m, AO_DENOM_FLOOR)
    down = max(m - w1, AO_DENOM_FLOOR)
    ao = np.where(x > m, (x - m) / up, (m - x) / down)
    ao[x == m] = 0.0
    return np.minimum(ao, AO_CAP)


def upper_outlyingness(values) -> np.ndarray:
    """Outlyingness above the clean bulk, hardened against contamination.

    The center is the median of the lower-scoring half (safe while at
    most half the values are corrupted upward); the unit of spread is
    the distance from that center down to the adjusted lower whisker of
    the full sample, mirrored upward. Values at or below the center
    score 0.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.shape[0] < 4:
        raise InsufficientDataError(f"upper_outlyingness needs >= 4 values, got {x.shape[0]}")
    n = x.shape[0]
    center = float(np.median(np.sort(x)[: n - n // 2]))
    w1, _ = adjusted_whiskers(x)
    spread = max(center - w1, AO_DENOM_FLOOR)
    return np.minimum(np.maximum(x - center, 0.0) / spread, AO_CAP)


@dataclass
class GaussianFit:
    """Single Gaussian fitted to the lower-loss half, plus its cutoff."""

    mean: float
    variance: float
    beta: float

    def density(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.exp(-((x - self.mean) ** 2) / (2.0 * self.variance)) \
            / np.sqrt(2.0 * np.pi * self.variance)


def _fit_truncated_gaussian(kept: np.ndarray, cutoff: float):
    """Gaussian parameters from samples known to lie at or below cutoff.

    Moment-matching for an upper-truncated normal: with a = (c - mu)/s
    and lam = phi(a)/Phi(a), the observed mean is mu - s*lam and the
    observed variance s^2 * (1 - a*lam - lam^2). Solved for a by
    bisection. When the data stop far below the cutoff this reduces to
    the plain sample moments; when they press against it, it recovers
    the untruncated parent.
    """
    x_bar = float(kept.mean())
    var_obs = float(kept.var())
    if var_obs < VARIANCE_FLOOR:
        return float(cutoff), VARIANCE_FLOOR

    from math import erf, exp, sqrt, pi

    def gap(a):
        phi = exp(-0.5 * a * a) / sqrt(2.0 * pi)
        cdf = 0.5 * (1.0 + erf(a / sqrt(2.0)))
        lam = phi / max(cdf, 1e-300)
        shape = 1.0 - a * lam - lam * lam
        if shape <= 1e-9:
            shape = 1e-9
        sigma = sqrt(var_obs / shape)
        mu = cutoff - a * sigma
        return (mu - sigma * lam) - x_bar, mu, sigma

    lo, hi = -5.0, 8.0
    g_lo = gap(lo)[0]
    g_hi = gap(hi)[0]
    if g_lo * g_hi > 0:
        # no crossing: fall back to untruncated moments
        return x_bar, max(var_obs, VARIANCE_FLOOR)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        g_mid, mu, sigma = gap(mid)
        if g_lo * g_mid <= 0:
            hi = mid
        else:
            lo, g_lo = mid, g_mid
    _, mu, sigma = gap(0.5 * (lo + hi))
    return mu, max(sigma * sigma, VARIANCE_FLOOR)


def adaptive_gmm(losses, beta: float = 1e-6):
    """Flag high-loss samples that are implausible under the clean bulk.

    Discards the highest-loss half, fits one Gaussian to the rest, and
    flags every sample from the full input whose loss exceeds the fitted
    mean and whose density falls below beta. The fit treats the kept
    half as an upper-truncated Gaussian sample (truncated at the
    discard boundary), so it estimates the whole clean bulk whether the
    discarded half was mostly clean or mostly corrupted. Returns
    (sorted index array, GaussianFit).
    """
    v = np.asarray(losses, dtype=np.float64)
    n = v.shape[0]
    if n < 4:
        raise InsufficientDataError(f"adaptive_gmm needs >= 4 values, got {n}")
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must lie in [0, 1)")
    order = np.argsort(v, kind="stable")
    kept = v[order[: n - n // 2]]
    mean, variance = _fit_truncated_gaussian(kept, float(kept.max()))
    fit = GaussianFit(mean=mean, variance=variance, beta=float(beta))
    flagged = np.where((v > fit.mean) & (fit.density(v) < beta))[0]
    return flagged, fit
