"""End-to-end architecture: Conv1D feature extractor over raw 16 kHz
audio, two stacked LSTMs, and a three-layer Bayes-by-Backprop MLP head
emitting one arousal value per 40 ms frame.

The pooling products of the conv stack must multiply to exactly 640
samples so each label frame aligns with one feature vector. Baseline
variants (single-task and multi-task perception-uncertainty) share the
extractor and swap the head for deterministic dense stacks.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from emobayes import autodiff as ad
from emobayes.autodiff import Tensor
from emobayes.dataset import FRAME_SAMPLES
from emobayes.layers import LSTM, BayesLinear, Conv1d, Dense, Prior, sample_schedule
from emobayes.losses import sample_std
from emobayes.metrics import median_filter

__all__ = [
    "FRAME_SAMPLES",
    "ModelConfig",
    "ConfigError",
    "PredictionDistribution",
    "UncertaintyModel",
    "STLModel",
    "MTLPUModel",
    "build_model",
    "desk_scale_config",
    "predict_distribution",
]

_ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


class ConfigError(ValueError):
    """Invalid model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters; defaults are the full-scale training recipe.

    ``conv_blocks`` rows are (kernel, channels, pool). alpha selects
    the system: 0 trains on model uncertainty only, 1 additionally on
    the label distribution.
    """

    conv_blocks: tuple = ((8, 64, 10), (6, 128, 8), (6, 128, 8))
    conv_activation: str = "relu"
    lstm_layers: int = 2
    lstm_hidden: int = 256
    bbb_hidden: tuple = (64, 64)
    window_frames: int = 50
    n_infer: int = 30
    n_train: int = 8
    prior_mean: float = 0.0
    prior_std: float = 1.0
    mu_init: tuple = (-0.1, 0.1)
    rho_init: tuple = (-3.0, -2.0)
    alpha: float = 1.0
    dropout: float = 0.5
    learning_rate: float = 1e-4
    batch_size: int = 5
    sequence_frames: int = 300
    epochs: int = 100
    seed: int = 7
    sigma_obs: float = 1.0
    median_window: int = 50

    def __post_init__(self):
        pool_product = 1
        for block in self.conv_blocks:
            if len(block) != 3:
                raise ConfigError(f"conv block must be (kernel, channels, pool), got {block!r}")
            pool_product *= block[2]
        if pool_product != FRAME_SAMPLES:
            raise ConfigError(
                f"conv pool sizes multiply to {pool_product}, need {FRAME_SAMPLES} "
                "for one feature vector per 40 ms frame")
        if self.conv_activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown conv activation {self.conv_activation!r}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.window_frames < 1:
            raise ConfigError(f"window_frames must be >= 1, got {self.window_frames}")
        if self.n_infer < 2 or self.n_train < 2:
            raise ConfigError("n_infer and n_train must be >= 2 (sample std needs 2 passes)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.prior_std <= 0 or self.sigma_obs <= 0:
            raise ConfigError("prior_std and sigma_obs must be positive")
        if self.lstm_layers < 1 or self.lstm_hidden < 1:
            raise ConfigError("need at least one LSTM layer with positive width")
        if min(self.batch_size, self.sequence_frames, self.epochs) < 1:
            raise ConfigError("batch_size, sequence_frames and epochs must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_blocks"] = [list(b) for b in self.conv_blocks]
        d["bbb_hidden"] = list(self.bbb_hidden)
        d["mu_init"] = list(self.mu_init)
        d["rho_init"] = list(self.rho_init)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        known = set(ModelConfig.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("conv_blocks",):
            if key in d:
                d[key] = tuple(tuple(b) for b in d[key])
        for key in ("bbb_hidden", "mu_init", "rho_init"):
            if key in d:
                d[key] = tuple(d[key])
        return ModelConfig(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def desk_scale_config(**overrides) -> ModelConfig:
    """Small configuration for CPU-scale experiments and CI.

    Shrinks channels and widths and raises the learning rate so a
    15-epoch run on 30 s recordings trains in minutes; every structural
    choice (three conv blocks pooling to 640, two LSTMs, three
    Bayesian layers, 50-frame windows) matches the full recipe.
    """
    base = dict(
        conv_blocks=((8, 16, 10), (6, 24, 8), (6, 24, 8)),
        lstm_hidden=32,
        bbb_hidden=(16, 16),
        n_train=4,
        learning_rate=2e-3,
        sequence_frames=150,
        epochs=15,
        dropout=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class PredictionDistribution:
    """Per-frame stochastic outputs plus the derived moments.

    ``samples`` is (n, T); ``m_hat`` comes from the posterior-mean
    pass, never from averaging samples; ``s_hat`` is the unbiased
    sample std. All three are median-filtered.
    """

    samples: np.ndarray
    m_hat: np.ndarray
    s_hat: np.ndarray
    frame_period: float = 0.04


# ---------------------------------------------------------------------------
# shared feature extractor
# ---------------------------------------------------------------------------

class FeatureExtractor:
    """Conv1D stack pooling 640 samples down to one vector per frame,
    followed by stacked LSTMs."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.convs = []
        self.pools = []
        c_in = 1
        for kernel, channels, pool in config.conv_blocks:
            self.convs.append(Conv1d(c_in, channels, kernel, rng))
            self.pools.append(pool)
            c_in = channels
        self.conv_out = c_in
        self.lstms = []
        for i in range(config.lstm_layers):
            self.lstms.append(LSTM(c_in if i == 0 else config.lstm_hidden, config.lstm_hidden, rng))
        self.activation = _ACTIVATIONS[config.conv_activation]

    def params(self):
        out = []
        for i, conv in enumerate(self.convs):
            out += [(f"conv{i}.{n}", t) for n, t in conv.params()]
        for i, lstm in enumerate(self.lstms):
            out += [(f"lstm{i}.{n}", t) for n, t in lstm.params()]
        return out

    def __call__(self, x: Tensor, dropout_rng: Optional[np.random.Generator] = None) -> Tensor:
        """(B, samples, 1) -> (B, frames, hidden). Dropout (training only,
        rng supplied) is applied to the conv-stack output."""
        for conv, pool in zip(self.convs, self.pools):
            x = self.activation(conv(x))
            x = ad.maxpool1d(x, pool)
        if dropout_rng is not None and self.config.dropout > 0.0:
            keep = 1.0 - self.config.dropout
            mask = (dropout_rng.random(x.shape) < keep).astype(np.float64)
            x = ad.dropout_mask_apply(x, mask, keep)
        for lstm in self.lstms:
            x = lstm(x)
        return x


def _dense_stack_widths(config: ModelConfig) -> list:
    return [config.lstm_hidden, *config.bbb_hidden, 1]


# ---------------------------------------------------------------------------
# proposed model
# ---------------------------------------------------------------------------

class UncertaintyModel:
    """Feature extractor plus the three-layer Bayesian MLP head.

    The head is applied window by window (``window_frames`` frames per
    weight draw); the deterministic pass runs through the identical
    windowed code path with the posterior means so that a collapsed
    posterior reproduces it bit for bit.
    """

    kind = "bbb"

    def __init__(self, config: ModelConfig, seed: Optional[int] = None):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence(
            [config.seed if seed is None else seed, 0]))
        self.extractor = FeatureExtractor(config, rng)
        self.prior = Prior(config.prior_mean, config.prior_std)
        widths = _dense_stack_widths(config)
        self.head = [
            BayesLinear(widths[i], widths[i + 1], self.prior, rng,
                        mu_range=config.mu_init, rho_range=config.rho_init)
            for i in range(len(widths) - 1)
        ]

    def params(self):
        out = self.extractor.params()
        for i, layer in enumerate(self.head):
            out += [(f"bbb{i}.{n}", t) for n, t in layer.params()]
        return out

    def collapse_posterior(self):
        for layer in self.head:
            layer.collapse_posterior()

    # -- head application -------------------------------------------------
    def _head_windows(self, n_frames: int):
        b = self.config.window_frames
        return [(start, min(start + b, n_frames)) for start in range(0, n_frames, b)]

    def _apply_head_seq(self, feats: Tensor, weights_for, dropout_masks=None) -> Tensor:
        """Run (T, H) features through the head; ``weights_for(layer, window)``
        supplies the (W, b) pair used inside each window."""
        n_frames = feats.shape[0]
        pieces = []
        for w_idx, (lo, hi) in enumerate(self._head_windows(n_frames)):
            h = feats[lo:hi]
            for l_idx, _layer in enumerate(self.head):
                w, bias = weights_for(l_idx, w_idx)
                h = ad.matmul(h, w) + bias
                if l_idx < len(self.head) - 1:
                    h = ad.tanh(h)
                    if dropout_masks is not None:
                        mask, keep = dropout_masks[l_idx]
                        h = ad.dropout_mask_apply(h, mask[lo:hi], keep)
            pieces.append(h)
        return ad.reshape(ad.concat(pieces, axis=0), (n_frames,))

    def head_mean(self, feats: Tensor, dropout_masks=None) -> Tensor:
        """Deterministic pass with w = mu_w; consumes no randomness."""
        def weights_for(l_idx, _w_idx):
            p = self.head[l_idx].params_
            return p.mu_w, p.mu_b
        return self._apply_head_seq(feats, weights_for, dropout_masks)

    def head_sampled(self, feats: Tensor, rng: np.random.Generator,
                     with_log_densities: bool = True, dropout_masks=None):
        """One stochastic pass; returns (output, per-layer WeightSchedules)."""
        n_frames = feats.shape[0]
        schedules = [
            sample_schedule(layer, n_frames, self.config.window_frames, rng, with_log_densities)
            for layer in self.head
        ]

        def weights_for(l_idx, w_idx):
            return schedules[l_idx].draws[w_idx]
        return self._apply_head_seq(feats, weights_for, dropout_masks), schedules

    def head_dropout_masks(self, n_frames: int, rng: Optional[np.random.Generator]):
        """Per-sequence masks for the gaps between the dense layers, drawn
        once and shared by every stochastic pass of a batch."""
        if rng is None or self.config.dropout <= 0.0:
            return None
        keep = 1.0 - self.config.dropout
        widths = _dense_stack_widths(self.config)
        return [((rng.random((n_frames, widths[i + 1])) < keep).astype(np.float64), keep)
                for i in range(len(self.head) - 1)]


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

class _DenseHead:
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        widths = _dense_stack_widths(config)
        self.layers = [Dense(widths[i], widths[i + 1], rng) for i in range(len(widths) - 1)]

    def __call__(self, feats: Tensor, dropout_masks=None) -> Tensor:
        h = feats
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = ad.tanh(h)
                if dropout_masks is not None:
                    mask, keep = dropout_masks[i]
                    h = ad.dropout_mask_apply(h, mask, keep)
        return ad.reshape(h, (feats.shape[0],))

    def params(self, prefix: str):
        out = []
        for i, layer in enumerate(self.layers):
            out += [(f"{prefix}{i}.{n}", t) for n, t in layer.params()]
        return out


class STLModel:
    """Single-task baseline: same extractor, deterministic head, mean only."""

    kind = "stl"

    def __init__(self, config: ModelConfig, seed: Optional[int] = None):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence(
            [config.seed if seed is None else seed, 0]))
        self.extractor = FeatureExtractor(config, rng)
        self.head = _DenseHead(config, rng)

    def params(self):
        return self.extractor.params() + self.head.params("dense")

    def head_dropout_masks(self, n_frames: int, rng):
        if rng is None or self.config.dropout <= 0.0:
            return None
        keep = 1.0 - self.config.dropout
        widths = _dense_stack_widths(self.config)
        return [((rng.random((n_frames, widths[i + 1])) < keep).astype(np.float64), keep)
                for i in range(len(widths) - 2)]


class MTLPUModel:
    """Multi-task perception-uncertainty baseline.

    Two deterministic heads predict the label mean and spread; after
    training, a single tuning scalar beta adjusts the mean by the
    centered spread estimate (a deliberately simplified stand-in for
    the original dynamic tuning layer)."""

    kind = "mtl_pu"

    def __init__(self, config: ModelConfig, seed: Optional[int] = None):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence(
            [config.seed if seed is None else seed, 0]))
        self.extractor = FeatureExtractor(config, rng)
        self.head_m = _DenseHead(config, rng)
        self.head_s = _DenseHead(config, rng)
        self.beta = 0.0

    def params(self):
        return (self.extractor.params()
                + self.head_m.params("dense_m") + self.head_s.params("dense_s"))

    def head_dropout_masks(self, n_frames: int, rng):
        if rng is None or self.config.dropout <= 0.0:
            return None
        keep = 1.0 - self.config.dropout
        widths = _dense_stack_widths(self.config)
        return [((rng.random((n_frames, widths[i + 1])) < keep).astype(np.float64), keep)
                for i in range(len(widths) - 2)]


_MODEL_KINDS = {"bbb": UncertaintyModel, "stl": STLModel, "mtl_pu": MTLPUModel}


def build_model(config: ModelConfig, kind: str = "bbb", seed: Optional[int] = None):
    """Construct a model; two builds with the same config and seed are
    parameter-identical."""
    try:
        cls = _MODEL_KINDS[kind]
    except KeyError:
        raise ConfigError(f"unknown model kind {kind!r}, expected one of {sorted(_MODEL_KINDS)}") from None
    return cls(config, seed=seed)


# ---------------------------------------------------------------------------
# waveform plumbing and stochastic inference
# ---------------------------------------------------------------------------

def waveform_to_input(waveform: np.ndarray) -> Tensor:
    """1-D waveform -> (1, samples, 1) constant input tensor."""
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1 or waveform.size == 0:
        raise ConfigError(f"waveform must be non-empty 1-D, got shape {waveform.shape}")
    if waveform.size % FRAME_SAMPLES != 0:
        raise ConfigError(f"waveform length {waveform.size} is not a multiple of {FRAME_SAMPLES}; "
                          "frame it first (frame_waveform pads and warns)")
    return Tensor(waveform.reshape(1, waveform.size, 1))


def model_features(model, waveform: np.ndarray) -> Tensor:
    """(T, hidden) inference features for a single recording (no dropout)."""
    feats = model.extractor(waveform_to_input(waveform))
    return ad.reshape(feats, (feats.shape[1], feats.shape[2]))


def predict_distribution(model: UncertaintyModel, waveform: np.ndarray, n: Optional[int] = None,
                         seed: int = 0) -> PredictionDistribution:
    """n stochastic passes plus one posterior-mean pass over a recording.

    Weight draws are windowed exactly as in training; the mean pass
    populates ``m_hat``. samples, m_hat and s_hat are median-filtered
    with the configured window before reporting.
    """
    n = model.config.n_infer if n is None else n
    if n < 2:
        raise ConfigError(f"predict_distribution needs n >= 2 passes, got {n}")
    with ad.no_grad():
        feats = model_features(model, waveform)
        n_frames = feats.shape[0]
        samples = np.empty((n, n_frames))
        for i in range(n):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 1 + i]))
            out, _ = model.head_sampled(feats, rng, with_log_densities=False)
            samples[i] = out.data
        m_hat = model.head_mean(feats).data
    s_hat = sample_std(samples)
    window = model.config.median_window
    return PredictionDistribution(
        samples=np.stack([median_filter(row, window) for row in samples]),
        m_hat=median_filter(m_hat, window),
        s_hat=median_filter(s_hat, window),
    )
