"""Network layers: deterministic Conv1D / LSTM / dense blocks and the
Bayes-by-Backprop linear layer with windowed weight sampling.

Activations flow through the graph as (batch, length, channels)
tensors. Every Bayesian layer keeps a diagonal-Gaussian variational
posterior over each weight and bias, parameterized as (mu, rho) with
sigma = softplus(rho) so plain backpropagation can optimize both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from emobayes import autodiff as ad
from emobayes.autodiff import Tensor

__all__ = [
    "Prior",
    "BayesParams",
    "WeightSchedule",
    "Dense",
    "Conv1d",
    "LSTM",
    "BayesLinear",
    "sample_schedule",
    "gaussian_log_density",
    "uniform_init",
]


def uniform_init(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class Prior:
    """Isotropic Gaussian prior over every sampled weight."""

    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.std <= 0:
            raise ValueError(f"prior std must be positive, got {self.std}")


class BayesParams:
    """Variational parameters (mu, rho) for one layer's weights and biases."""

    def __init__(self, mu_w: Tensor, rho_w: Tensor, mu_b: Tensor, rho_b: Tensor):
        if mu_w.shape != rho_w.shape or mu_b.shape != rho_b.shape:
            raise ad.ShapeError("mu/rho shapes must match")
        self.mu_w = mu_w
        self.rho_w = rho_w
        self.mu_b = mu_b
        self.rho_b = rho_b

    def tensors(self):
        return [self.mu_w, self.rho_w, self.mu_b, self.rho_b]

    @property
    def n_coords(self) -> int:
        return self.mu_w.size + self.mu_b.size


def gaussian_log_density(x: Tensor, mean: Tensor, std: Tensor) -> Tensor:
    """Summed diagonal-Gaussian log density, differentiable in all args."""
    z = (x - mean) / std
    return ad.tsum(-ad.log(std) - 0.5 * ad.square(z)) - Tensor(0.5 * x.size * ad.LOG_2PI)


# ---------------------------------------------------------------------------
# deterministic layers
# ---------------------------------------------------------------------------

class Dense:
    """Affine layer on the trailing axis: y = x @ W + b."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(n_in)
        self.w = Tensor(uniform_init(rng, (n_in, n_out), bound), requires_grad=True)
        self.b = Tensor(uniform_init(rng, (n_out,), bound), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w) + self.b

    def params(self):
        return [("w", self.w), ("b", self.b)]


class Conv1d:
    """Same-padded 1-D convolution over (B, L, C_in)."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(c_in * kernel)
        self.w = Tensor(uniform_init(rng, (c_out, c_in, kernel), bound), requires_grad=True)
        self.b = Tensor(uniform_init(rng, (c_out,), bound), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.w) + self.b

    def params(self):
        return [("w", self.w), ("b", self.b)]


class LSTM:
    """Single LSTM layer; gates ordered (input, forget, candidate, output).

    Weight init is uniform in [-k, k] with k = 1/sqrt(hidden); the
    forget-gate bias starts at 1.0. State is carried across the full
    sequence (no truncation).
    """

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        k = 1.0 / math.sqrt(hidden)
        self.wx = Tensor(uniform_init(rng, (n_in, 4 * hidden), k), requires_grad=True)
        self.wh = Tensor(uniform_init(rng, (hidden, 4 * hidden), k), requires_grad=True)
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0
        self.b = Tensor(bias, requires_grad=True)

    def params(self):
        return [("wx", self.wx), ("wh", self.wh), ("b", self.b)]

    def step(self, x_t: Tensor, state: tuple) -> tuple:
        """One cell update from (B, n_in) input and ((B,H), (B,H)) state."""
        return self._step_from_gates(ad.matmul(x_t, self.wx) + self.b, state)

    def _step_from_gates(self, xw_t: Tensor, state: tuple) -> tuple:
        h, c = state
        hidden = self.hidden
        z = xw_t + ad.matmul(h, self.wh)
        i = ad.sigmoid(z[:, 0 * hidden:1 * hidden])
        f = ad.sigmoid(z[:, 1 * hidden:2 * hidden])
        g = ad.tanh(z[:, 2 * hidden:3 * hidden])
        o = ad.sigmoid(z[:, 3 * hidden:4 * hidden])
        c_new = f * c + i * g
        h_new = o * ad.tanh(c_new)
        return h_new, c_new

    def __call__(self, x: Tensor) -> Tensor:
        """Run the full sequence (B, T, F) -> (B, T, H)."""
        batch, n_frames, n_in = x.shape
        # One big input projection up front; per-step slices reuse it.
        xw = ad.matmul(ad.reshape(x, (batch * n_frames, n_in)), self.wx) + self.b
        xw = ad.reshape(xw, (batch, n_frames, 4 * self.hidden))
        h = Tensor(np.zeros((batch, self.hidden)))
        c = Tensor(np.zeros((batch, self.hidden)))
        outputs = []
        for t in range(n_frames):
            xw_t = ad.reshape(xw[:, t:t + 1, :], (batch, 4 * self.hidden))
            h, c = self._step_from_gates(xw_t, (h, c))
            outputs.append(ad.reshape(h, (batch, 1, self.hidden)))
        return ad.concat(outputs, axis=1)


# ---------------------------------------------------------------------------
# Bayes-by-Backprop linear layer
# ---------------------------------------------------------------------------

@dataclass
class WeightSchedule:
    """Windowed weight draws for one Bayesian layer over T frames.

    Holds ceil(T / window_frames) independent draws; frame t uses draw
    floor(t / window_frames). log_q / log_prior are recorded per draw
    as graph nodes so the complexity term stays differentiable.
    """

    draws: list
    window_frames: int
    n_frames: int
    log_q: list = field(default_factory=list)
    log_prior: list = field(default_factory=list)

    @property
    def n_draws(self) -> int:
        return len(self.draws)

    def draw_index(self, frame: int) -> int:
        if not 0 <= frame < self.n_frames:
            raise IndexError(f"frame {frame} outside [0, {self.n_frames})")
        return frame // self.window_frames


class BayesLinear:
    """Affine layer with a factorized Gaussian posterior on weights and biases.

    Sampling uses the reparameterization w = mu + softplus(rho) * eps,
    so gradients reach both halves of theta. The deterministic pass
    applies the posterior means directly and consumes no randomness.
    """

    def __init__(self, n_in: int, n_out: int, prior: Prior, rng: np.random.Generator,
                 mu_range: tuple = (-0.1, 0.1), rho_range: tuple = (-3.0, -2.0)):
        self.n_in = n_in
        self.n_out = n_out
        self.prior = prior
        self.params_ = BayesParams(
            Tensor(rng.uniform(*mu_range, size=(n_in, n_out)), requires_grad=True),
            Tensor(rng.uniform(*rho_range, size=(n_in, n_out)), requires_grad=True),
            Tensor(rng.uniform(*mu_range, size=(n_out,)), requires_grad=True),
            Tensor(rng.uniform(*rho_range, size=(n_out,)), requires_grad=True),
        )

    def params(self):
        p = self.params_
        return [("mu_w", p.mu_w), ("rho_w", p.rho_w), ("mu_b", p.mu_b), ("rho_b", p.rho_b)]

    def draw_weights(self, rng: np.random.Generator, with_log_densities: bool = True):
        """Sample one (W, b) set; optionally score it under q and the prior."""
        p = self.params_
        sigma_w = ad.softplus(p.rho_w)
        sigma_b = ad.softplus(p.rho_b)
        w = p.mu_w + sigma_w * Tensor(rng.standard_normal(p.mu_w.shape))
        b = p.mu_b + sigma_b * Tensor(rng.standard_normal(p.mu_b.shape))
        if not with_log_densities:
            return w, b, None, None
        prior_mean = Tensor(self.prior.mean)
        prior_std = Tensor(self.prior.std)
        log_q = gaussian_log_density(w, p.mu_w, sigma_w) + gaussian_log_density(b, p.mu_b, sigma_b)
        log_p = (gaussian_log_density(w, prior_mean, prior_std)
                 + gaussian_log_density(b, prior_mean, prior_std))
        return w, b, log_q, log_p

    def sample(self, x: Tensor, rng: np.random.Generator):
        """Stochastic forward pass; returns (output, log_q, log_prior)."""
        w, b, log_q, log_p = self.draw_weights(rng)
        return ad.matmul(x, w) + b, log_q, log_p

    def mean(self, x: Tensor) -> Tensor:
        """Deterministic forward with the posterior means."""
        return ad.matmul(x, self.params_.mu_w) + self.params_.mu_b

    def closed_form_prior_kl(self) -> float:
        """Sum over coordinates of KL(N(mu, sigma) || prior), exact."""
        total = 0.0
        for mu, rho in ((self.params_.mu_w, self.params_.rho_w),
                        (self.params_.mu_b, self.params_.rho_b)):
            sigma = np.logaddexp(0.0, rho.data)
            var_ratio = (sigma / self.prior.std) ** 2
            mean_term = ((mu.data - self.prior.mean) / self.prior.std) ** 2
            total += float(np.sum(0.5 * (var_ratio + mean_term - 1.0) - np.log(sigma / self.prior.std)))
        return total

    def collapse_posterior(self):
        """Force sigma to exactly zero (softplus underflow); test hook for
        the degenerate-posterior equivalence."""
        self.params_.rho_w.data = np.full_like(self.params_.rho_w.data, -1e6)
        self.params_.rho_b.data = np.full_like(self.params_.rho_b.data, -1e6)


def sample_schedule(layer: BayesLinear, n_frames: int, window_frames: int,
                    rng: np.random.Generator, with_log_densities: bool = True) -> WeightSchedule:
    """Draw ceil(T/b) independent weight sets for a T-frame sequence.

    Uncertainty is assumed constant within each b-frame window, so one
    draw covers all its frames.
    """
    if n_frames < 1 or window_frames < 1:
        raise ValueError(f"need n_frames >= 1 and window_frames >= 1, got {n_frames}, {window_frames}")
    n_draws = -(-n_frames // window_frames)
    schedule = WeightSchedule(draws=[], window_frames=window_frames, n_frames=n_frames)
    for _ in range(n_draws):
        w, b, log_q, log_p = layer.draw_weights(rng, with_log_densities)
        schedule.draws.append((w, b))
        if with_log_densities:
            schedule.log_q.append(log_q)
            schedule.log_prior.append(log_p)
    return schedule
