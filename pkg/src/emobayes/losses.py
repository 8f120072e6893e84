"""Differentiable training objectives.

The combined loss is

    total = (1 - CCC(m, m_hat)) + L_BBB + alpha * L_KL

where L_BBB is the stochastic evidence-bound term (Monte-Carlo
complexity of the weight posterior against its prior, plus a Gaussian
data-fit term) and L_KL fits the per-frame predicted output
distribution to the per-frame annotation distribution. alpha = 0
captures model uncertainty only; alpha = 1 additionally captures label
uncertainty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from emobayes import autodiff as ad
from emobayes.autodiff import Tensor
from emobayes.labels import S_MIN, GaussianLabel
from emobayes.layers import WeightSchedule

__all__ = [
    "LossError",
    "LossBreakdown",
    "ccc_graph",
    "ccc_training_term",
    "kl_label_loss",
    "gaussian_nll",
    "bbb_loss",
    "total_loss",
    "sample_std",
]


class LossError(ValueError):
    """Invalid loss input (misaligned frames, empty schedules, bad alpha)."""


def ccc_graph(x: Tensor, y: Tensor) -> Tensor:
    """Concordance correlation coefficient as a graph node (population moments)."""
    if x.shape != y.shape:
        raise LossError(f"ccc needs equal shapes, got {x.shape} and {y.shape}")
    mx = ad.mean(x)
    my = ad.mean(y)
    cov = ad.mean((x - mx) * (y - my))
    denom = ad.variance(x) + ad.variance(y) + ad.square(mx - my)
    if float(denom.data) == 0.0:
        # Both sequences are the same constant: perfect concordance,
        # nothing to differentiate through.
        return Tensor(1.0)
    return 2.0 * cov / denom


def ccc_training_term(predictions: Sequence[Tensor], targets: Sequence[np.ndarray]) -> Tensor:
    """1 - CCC against the label mean, averaged over the batch sequences."""
    if len(predictions) != len(targets) or not predictions:
        raise LossError("prediction/target sequence counts differ or are empty")
    terms = [Tensor(1.0) - ccc_graph(Tensor(np.asarray(t)), p) for p, t in zip(predictions, targets)]
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total / float(len(terms))


def sample_std(samples: np.ndarray) -> np.ndarray:
    """Unbiased per-frame std over the sample axis (axis 0).

    Frames where all samples are bitwise equal are exactly 0, guarding
    the collapsed-posterior case against mean-rounding noise.
    """
    n = samples.shape[0]
    if n < 2:
        raise LossError(f"sample std needs n >= 2 stochastic passes, got {n}")
    dev = samples - samples.mean(axis=0, keepdims=True)
    out = np.sqrt((dev * dev).sum(axis=0) / (n - 1))
    out[np.all(samples == samples[0], axis=0)] = 0.0
    return out


def kl_label_loss(label: GaussianLabel, samples: Tensor, s_min: float = S_MIN) -> Tensor:
    """Mean per-frame KL(annotation distribution || predicted distribution).

    ``samples`` holds the n stochastic outputs as an (n, T) node; the
    predicted distribution at each frame is the differentiable sample
    mean and unbiased sample std, the latter floored at ``s_min``. The
    label std is floored the same way so the divergence stays finite.
    """
    n, frames = samples.shape
    if n < 2:
        raise LossError(f"kl_label_loss needs n >= 2 stochastic passes, got {n}")
    if label.m.shape != (frames,):
        raise LossError(f"label has {label.m.shape[0]} frames, predictions have {frames}")
    m_p = Tensor(label.m)
    s_p = Tensor(np.maximum(label.s, s_min))
    m_hat = ad.mean(samples, axis=0)
    s_hat = ad.sqrt(ad.variance(samples, axis=0, ddof=1))
    s_hat = ad.relu(s_hat - s_min) + s_min  # floor, differentiable above it
    kl = (ad.log(s_hat) - ad.log(s_p)
          + (ad.square(s_p) + ad.square(m_p - m_hat)) / (2.0 * ad.square(s_hat))
          - 0.5)
    return ad.mean(kl)


def gaussian_nll(target: np.ndarray, output: Tensor, sigma_obs: float) -> Tensor:
    """Per-frame-mean Gaussian negative log likelihood of the labels.

    Realizes the data-fit term of the evidence bound as
    N(label_mean | output, sigma_obs) with fixed observation noise.
    """
    if sigma_obs <= 0:
        raise LossError(f"sigma_obs must be positive, got {sigma_obs}")
    z = (output - Tensor(np.asarray(target))) / sigma_obs
    return ad.mean(0.5 * ad.square(z)) + Tensor(math.log(sigma_obs) + 0.5 * ad.LOG_2PI)


def bbb_loss(schedules: Sequence[WeightSchedule], data_fit, n_passes: int,
             num_minibatches: int) -> Tensor:
    """Stochastic evidence-bound term for one sequence.

    Averages sum(log q - log prior) over the ``n_passes`` stochastic
    passes (each schedule contributes every window draw of one layer in
    one pass), scales the complexity by 1/num_minibatches so the
    per-epoch posterior penalty is counted once, and adds the caller's
    data-fit term.
    """
    schedules = list(schedules)
    if not schedules:
        raise LossError("bbb_loss needs at least one weight schedule")
    if n_passes < 1 or num_minibatches < 1:
        raise LossError(f"bad scaling: n_passes={n_passes}, num_minibatches={num_minibatches}")
    complexity = None
    for schedule in schedules:
        if not schedule.log_q:
            raise LossError("schedule carries no log densities; sample with with_log_densities=True")
        for log_q, log_p in zip(schedule.log_q, schedule.log_prior):
            term = log_q - log_p
            complexity = term if complexity is None else complexity + term
    complexity = complexity / float(n_passes * num_minibatches)
    if not isinstance(data_fit, Tensor):
        data_fit = Tensor(float(data_fit))
    return complexity + data_fit


@dataclass
class LossBreakdown:
    """The combined loss and its logged components.

    ``total == ccc_term + bbb_term + alpha * kl_term`` holds by
    construction; ``node`` is the graph head to backpropagate.
    """

    ccc_term: float
    bbb_term: float
    kl_term: float
    alpha: float
    total: float
    node: Optional[Tensor] = None

    def check(self, tol: float = 1e-12):
        expect = self.ccc_term + self.bbb_term + self.alpha * self.kl_term
        if abs(self.total - expect) > tol * max(1.0, abs(expect)):
            raise LossError(f"loss breakdown inconsistent: total={self.total}, parts={expect}")


def total_loss(ccc_term: Tensor, bbb_term: Tensor, kl_term: Tensor, alpha: float) -> LossBreakdown:
    """Combine the three objectives under the label-uncertainty weight.

    With alpha = 0 the KL node is left detached - its value is still
    logged, but no gradient flows through it.
    """
    if alpha < 0:
        raise LossError(f"alpha must be >= 0, got {alpha}")
    node = ccc_term + bbb_term
    if alpha > 0:
        node = node + float(alpha) * kl_term
    breakdown = LossBreakdown(
        ccc_term=float(ccc_term.data),
        bbb_term=float(bbb_term.data),
        kl_term=float(kl_term.data),
        alpha=float(alpha),
        total=float(node.data),
        node=node,
    )
    breakdown.check()
    return breakdown
