"""Evaluation metrics and the significance test.

Float-space counterparts of the differentiable training terms: the
concordance correlation coefficient, the closed-form Gaussian KL
divergence, the sliding median filter used as the sole post-processing
step, and the paired one-tailed t-test used to compare systems across
recordings.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
from scipy import special

__all__ = [
    "ccc",
    "gaussian_kl",
    "median_filter",
    "paired_t_test_one_tailed",
    "MetricError",
]


class MetricError(ValueError):
    """Invalid metric input (length mismatch, empty, bad parameters)."""


def ccc(x, y) -> float:
    """Concordance correlation coefficient with population (1/T) moments.

    2 cov(x,y) / (var x + var y + (mean x - mean y)^2), penalizing both
    decorrelation and bias. The denominator vanishes only when both
    sequences are the same constant, which counts as perfect
    concordance (1.0).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricError(f"ccc needs equal-length 1-D sequences, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise MetricError(f"ccc needs at least 2 frames, got {x.size}")
    mx, my = x.mean(), y.mean()
    vx = ((x - mx) ** 2).mean()
    vy = ((y - my) ** 2).mean()
    cov = ((x - mx) * (y - my)).mean()
    denom = vx + vy + (mx - my) ** 2
    if denom == 0.0:
        return 1.0
    return float(2.0 * cov / denom)


def gaussian_kl(p: tuple, q: tuple) -> float:
    """KL(N(mu_p, sigma_p) || N(mu_q, sigma_q)) in closed form.

    The order matters: the first argument is the true distribution and
    the second its estimate (mean-seeking direction).
    """
    mu_p, sigma_p = p
    mu_q, sigma_q = q
    if sigma_p <= 0 or sigma_q <= 0:
        raise MetricError(f"gaussian_kl needs positive stds, got {sigma_p} and {sigma_q}")
    return float(math.log(sigma_q / sigma_p)
                 + (sigma_p ** 2 + (mu_p - mu_q) ** 2) / (2.0 * sigma_q ** 2) - 0.5)


def median_filter(seq, window: int) -> np.ndarray:
    """Centered sliding median with edge truncation.

    For window w the frame at t sees [t - (w-1)//2, t + w//2], clipped
    to the sequence; an even number of in-window values averages the
    two central ones (numpy median convention).
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 1:
        raise MetricError(f"median_filter needs a 1-D sequence, got shape {seq.shape}")
    if seq.size == 0:
        raise MetricError("median_filter of an empty sequence")
    if window < 1:
        raise MetricError(f"window must be >= 1, got {window}")
    half_l = (window - 1) // 2
    half_r = window // 2
    out = np.empty_like(seq)
    n = seq.size
    for t in range(n):
        lo = max(0, t - half_l)
        hi = min(n, t + half_r + 1)
        out[t] = np.median(seq[lo:hi])
    return out


def paired_t_test_one_tailed(scores_a, scores_b) -> float:
    """Upper-tail p-value that system A scores higher than system B.

    Pairs scores per recording, forms d = a - b, and evaluates the
    Student-t tail with k-1 degrees of freedom. Degenerate cases follow
    the usual conventions: all differences zero gives p = 1 (flagged
    with a warning, there is no evidence either way); zero variance
    with a nonzero mean is an infinite t statistic and collapses to
    p = 0 or p = 1 by sign.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricError(f"paired test needs equal-length 1-D scores, got {a.shape} and {b.shape}")
    k = a.size
    if k < 2:
        raise MetricError(f"paired test needs k >= 2 pairs, got {k}")
    d = a - b
    md = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if md == 0.0:
            warnings.warn("paired t-test: all differences are zero, no evidence (p = 1)",
                          stacklevel=2)
            return 1.0
        return 0.0 if md > 0 else 1.0
    t = md / (sd / math.sqrt(k))
    # Upper tail of Student-t with k-1 dof via the regularized
    # incomplete beta (scipy's stdtr evaluates its continued fraction).
    return float(1.0 - special.stdtr(k - 1, t))
