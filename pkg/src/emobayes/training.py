"""Training loops, the Adam optimizer, and checkpointing.

One training step drives a batch of fixed-length sequence crops
through the feature extractor once, then runs the deterministic
posterior-mean pass (for the concordance term) plus ``n_train``
stochastic passes through the Bayesian head. Weight draws are windowed
and shared across the sequences of a batch (one draw covers every
minibatch element), which keeps the Monte-Carlo complexity estimate
unbiased while halving the graph size.

All randomness is derived statelessly from (seed, purpose, epoch,
batch), so resuming from a checkpoint reproduces an uninterrupted run
bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from emobayes import autodiff as ad
from emobayes.autodiff import Tensor
from emobayes.dataset import FRAME_SAMPLES, Recording
from emobayes.labels import GaussianLabel, S_MIN, label_distribution
from emobayes.losses import (LossBreakdown, bbb_loss, ccc_training_term, gaussian_nll,
                             kl_label_loss, total_loss)
from emobayes.metrics import median_filter
from emobayes.model import (ModelConfig, MTLPUModel, STLModel, UncertaintyModel, build_model,
                            model_features)

__all__ = [
    "Adam",
    "Checkpoint",
    "TrainingError",
    "TrainOutcome",
    "SYSTEMS",
    "system_kind",
    "system_alpha",
    "train",
    "train_baseline",
    "predict_baseline",
    "model_from_checkpoint",
]

CHECKPOINT_VERSION = 1

# System names as reported: the proposed model with alpha = 0 (model
# uncertainty only), alpha = 1 (plus label uncertainty), and the two
# deterministic baselines.
SYSTEMS = ("mu", "lu", "stl", "mtl_pu")


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss term, empty split, bad resume)."""


def system_kind(system: str) -> str:
    if system in ("mu", "lu"):
        return "bbb"
    if system in ("stl", "mtl_pu"):
        return system
    raise TrainingError(f"unknown system {system!r}, expected one of {SYSTEMS}")


def system_alpha(system: str, config: ModelConfig) -> float:
    if system == "mu":
        return 0.0
    if system == "lu":
        return 1.0
    return config.alpha


class Adam:
    """Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8)."""

    def __init__(self, tensors: Sequence[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.tensors = list(tensors)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.tensors]
        self.v = [np.zeros_like(p.data) for p in self.tensors]

    def step(self):
        self.t += 1
        correct1 = 1.0 - self.beta1 ** self.t
        correct2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.tensors):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / correct1
            v_hat = self.v[i] / correct2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.tensors:
            p.grad = None


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Versioned snapshot: weights, optimizer moments, selection state."""

    system: str
    config: dict
    config_hash: str
    epoch: int
    best_loss: float
    params: dict
    adam_m: dict
    adam_v: dict
    adam_t: int
    extras: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def save(self, path):
        meta = {
            "version": self.version,
            "system": self.system,
            "config": self.config,
            "config_hash": self.config_hash,
            "epoch": self.epoch,
            "best_loss": self.best_loss,
            "adam_t": self.adam_t,
            "extras": self.extras,
            "param_names": list(self.params),
        }
        arrays = {"meta": np.array(json.dumps(meta, sort_keys=True))}
        for name, arr in self.params.items():
            arrays[f"param::{name}"] = arr
            arrays[f"adam_m::{name}"] = self.adam_m[name]
            arrays[f"adam_v::{name}"] = self.adam_v[name]
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @staticmethod
    def load(path) -> "Checkpoint":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            if meta["version"] != CHECKPOINT_VERSION:
                raise TrainingError(f"{path}: checkpoint version {meta['version']}, "
                                    f"expected {CHECKPOINT_VERSION}")
            params = {n: data[f"param::{n}"] for n in meta["param_names"]}
            adam_m = {n: data[f"adam_m::{n}"] for n in meta["param_names"]}
            adam_v = {n: data[f"adam_v::{n}"] for n in meta["param_names"]}
        return Checkpoint(
            system=meta["system"], config=meta["config"], config_hash=meta["config_hash"],
            epoch=meta["epoch"], best_loss=meta["best_loss"], params=params,
            adam_m=adam_m, adam_v=adam_v, adam_t=meta["adam_t"], extras=meta["extras"])


def _snapshot(model, system: str, config: ModelConfig, adam: Adam, epoch: int,
              best_loss: float, extras: Optional[dict] = None) -> Checkpoint:
    names = [n for n, _ in model.params()]
    tensors = [t for _, t in model.params()]
    return Checkpoint(
        system=system,
        config=config.to_dict(),
        config_hash=config.config_hash(),
        epoch=epoch,
        best_loss=best_loss,
        params={n: t.data.copy() for n, t in zip(names, tensors)},
        adam_m={n: m.copy() for n, m in zip(names, adam.m)},
        adam_v={n: v.copy() for n, v in zip(names, adam.v)},
        adam_t=adam.t,
        extras=dict(extras or {}),
    )


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild the model and restore every weight bit-exactly."""
    config = ModelConfig.from_dict(ckpt.config)
    model = build_model(config, kind=system_kind(ckpt.system))
    _load_params(model, ckpt)
    if isinstance(model, MTLPUModel):
        model.beta = float(ckpt.extras.get("beta", 0.0))
    return model


def _load_params(model, ckpt: Checkpoint):
    current = dict(model.params())
    if set(current) != set(ckpt.params):
        missing = sorted(set(current) ^ set(ckpt.params))
        raise TrainingError(f"checkpoint parameter names do not match model: {missing}")
    for name, tensor in current.items():
        arr = ckpt.params[name]
        if arr.shape != tensor.data.shape:
            raise TrainingError(f"checkpoint param {name} has shape {arr.shape}, "
                                f"model expects {tensor.data.shape}")
        tensor.data = arr.copy()


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

@dataclass
class _RecordingArrays:
    recording_id: str
    waveform: np.ndarray
    m: np.ndarray
    s: np.ndarray  # floored at S_MIN


def _prepare(recordings: Sequence[Recording]) -> list:
    out = []
    for rec in recordings:
        dist = label_distribution(rec.trace)
        out.append(_RecordingArrays(rec.recording_id, np.asarray(rec.waveform, dtype=np.float64),
                                    dist.m, dist.s))
    return out


def _crop_list(data: Sequence[_RecordingArrays], seq_frames: int) -> list:
    """Non-overlapping seq_frames crops per recording; a trailing
    remainder shorter than one crop is dropped."""
    crops = []
    for rec_idx, rec in enumerate(data):
        n_frames = rec.m.size
        for start in range(0, n_frames - seq_frames + 1, seq_frames):
            crops.append((rec_idx, start))
    return crops


def _rng(config_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config_seed, *key]))


# ---------------------------------------------------------------------------
# batch losses
# ---------------------------------------------------------------------------

def _term(label: str, fn: Callable[[], Tensor]) -> Tensor:
    """Evaluate one loss term, converting engine errors into a training
    abort that names the term."""
    try:
        value = fn()
    except ad.NonFiniteError as exc:
        raise TrainingError(f"non-finite {label} term ({exc})") from exc
    if not np.all(np.isfinite(value.data)):
        raise TrainingError(f"non-finite {label} term")
    return value


def _batch_features(model, batch_waveforms: np.ndarray, dropout_rng):
    x = Tensor(batch_waveforms[:, :, None])
    return model.extractor(x, dropout_rng=dropout_rng)


def _seq_features(feats: Tensor, i: int) -> Tensor:
    _, n_frames, hidden = feats.shape
    return ad.reshape(feats[i:i + 1], (n_frames, hidden))


def _bbb_batch_loss(model: UncertaintyModel, feats: Tensor, m_targets, s_targets,
                    alpha: float, num_batches: int, noise_rng, dropout_rng) -> LossBreakdown:
    config = model.config
    batch = len(m_targets)
    n_frames = m_targets[0].size
    seq_feats = [_seq_features(feats, i) for i in range(batch)]
    masks = [model.head_dropout_masks(n_frames, dropout_rng) for _ in range(batch)]

    mean_outs = [model.head_mean(seq_feats[i], masks[i]) for i in range(batch)]
    ccc_term = _term("ccc", lambda: ccc_training_term(mean_outs, m_targets))

    # One windowed weight draw set per pass, shared across the batch.
    all_schedules = []
    nll_terms = []
    sample_rows = [[] for _ in range(batch)]
    for _ in range(config.n_train):
        schedules = None
        for i in range(batch):
            if schedules is None:
                out, schedules = model.head_sampled(seq_feats[i], noise_rng,
                                                    with_log_densities=True,
                                                    dropout_masks=masks[i])
            else:
                def weights_for(l_idx, w_idx, s=schedules):
                    return s[l_idx].draws[w_idx]
                out = model._apply_head_seq(seq_feats[i], weights_for, masks[i])
            sample_rows[i].append(out)
            nll_terms.append(gaussian_nll(m_targets[i], out, config.sigma_obs))
        all_schedules.extend(schedules)

    def fit_term():
        total = nll_terms[0]
        for t in nll_terms[1:]:
            total = total + t
        return total / float(len(nll_terms))

    bbb_term = _term("bbb", lambda: bbb_loss(
        all_schedules, fit_term(), n_passes=config.n_train, num_minibatches=num_batches))

    def kl_term_fn():
        total = None
        for i in range(batch):
            samples = ad.stack_rows(sample_rows[i])
            term = kl_label_loss(GaussianLabel(m_targets[i], s_targets[i]), samples)
            total = term if total is None else total + term
        return total / float(batch)

    kl_term = _term("kl", kl_term_fn)
    return total_loss(ccc_term, bbb_term, kl_term, alpha)


def _stl_batch_loss(model: STLModel, feats: Tensor, m_targets, dropout_rng) -> LossBreakdown:
    batch = len(m_targets)
    n_frames = m_targets[0].size
    outs = []
    for i in range(batch):
        masks = model.head_dropout_masks(n_frames, dropout_rng)
        outs.append(model.head(_seq_features(feats, i), masks))
    ccc_term = _term("ccc", lambda: ccc_training_term(outs, m_targets))
    zero = Tensor(0.0)
    return total_loss(ccc_term, zero, zero, 0.0)


def _mtl_batch_loss(model: MTLPUModel, feats: Tensor, m_targets, s_targets,
                    dropout_rng) -> LossBreakdown:
    batch = len(m_targets)
    n_frames = m_targets[0].size
    outs_m, outs_s = [], []
    for i in range(batch):
        f = _seq_features(feats, i)
        outs_m.append(model.head_m(f, model.head_dropout_masks(n_frames, dropout_rng)))
        outs_s.append(model.head_s(f, model.head_dropout_masks(n_frames, dropout_rng)))
    # Both tasks are concordance losses; they are reported together.
    def combined():
        return ccc_training_term(outs_m, m_targets) + ccc_training_term(outs_s, s_targets)
    ccc_term = _term("ccc", combined)
    zero = Tensor(0.0)
    return total_loss(ccc_term, zero, zero, 0.0)


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainOutcome:
    best: Checkpoint
    last: Checkpoint
    curve: list


def train(model, recordings: Sequence[Recording], system: str,
          config: Optional[ModelConfig] = None,
          resume: Optional[Checkpoint] = None,
          log: Optional[Callable[[str], None]] = None) -> TrainOutcome:
    """Train any system on the given recordings; returns best/last
    checkpoints (selected on best epoch-mean training loss) plus the
    per-epoch loss curve."""
    config = config or model.config
    if not recordings:
        raise TrainingError("empty train split")
    data = _prepare(recordings)
    crops = _crop_list(data, config.sequence_frames)
    if not crops:
        raise TrainingError(f"no recording is >= {config.sequence_frames} frames long")
    num_batches = -(-len(crops) // config.batch_size)
    alpha = system_alpha(system, config)
    kind = system_kind(system)

    adam = Adam([t for _, t in model.params()], lr=config.learning_rate)
    start_epoch = 0
    best_loss = float("inf")
    best_ckpt = None
    if resume is not None:
        if resume.system != system:
            raise TrainingError(f"resume checkpoint is for system {resume.system!r}, not {system!r}")
        _load_params(model, resume)
        names = [n for n, _ in model.params()]
        adam.m = [resume.adam_m[n].copy() for n in names]
        adam.v = [resume.adam_v[n].copy() for n in names]
        adam.t = resume.adam_t
        start_epoch = resume.epoch
        best_loss = resume.best_loss

    curve = []
    for epoch in range(start_epoch, config.epochs):
        order = _rng(config.seed, 10, epoch).permutation(len(crops))
        sums = np.zeros(4)
        for b_idx in range(num_batches):
            chosen = [crops[i] for i in order[b_idx * config.batch_size:(b_idx + 1) * config.batch_size]]
            wav = np.stack([
                data[r].waveform[s * FRAME_SAMPLES:(s + config.sequence_frames) * FRAME_SAMPLES]
                for r, s in chosen])
            m_targets = [data[r].m[s:s + config.sequence_frames] for r, s in chosen]
            s_targets = [data[r].s[s:s + config.sequence_frames] for r, s in chosen]
            noise_rng = _rng(config.seed, 11, epoch, b_idx)
            dropout_rng = _rng(config.seed, 12, epoch, b_idx) if config.dropout > 0 else None

            feats = _batch_features(model, wav, dropout_rng)
            if kind == "bbb":
                breakdown = _bbb_batch_loss(model, feats, m_targets, s_targets, alpha,
                                            num_batches, noise_rng, dropout_rng)
            elif kind == "stl":
                breakdown = _stl_batch_loss(model, feats, m_targets, dropout_rng)
            else:
                breakdown = _mtl_batch_loss(model, feats, m_targets, s_targets, dropout_rng)
            ad.backward(breakdown.node)
            adam.step()
            adam.zero_grad()
            sums += (breakdown.ccc_term, breakdown.bbb_term, breakdown.kl_term, breakdown.total)

        means = sums / num_batches
        row = {"epoch": epoch + 1, "ccc_term": means[0], "bbb_term": means[1],
               "kl_term": means[2], "total": means[3]}
        curve.append(row)
        if log:
            log(f"epoch {epoch + 1}/{config.epochs}: total={means[3]:.6f} "
                f"ccc={means[0]:.6f} bbb={means[1]:.6f} kl={means[2]:.6f}")
        if means[3] < best_loss:
            best_loss = means[3]
            best_ckpt = _snapshot(model, system, config, adam, epoch + 1, best_loss)

    extras = {}
    if isinstance(model, MTLPUModel):
        model.beta = _fit_mtl_beta(model, data)
        extras["beta"] = model.beta
    if best_ckpt is None:
        best_ckpt = _snapshot(model, system, config, adam, start_epoch, best_loss, extras)
    elif extras:
        best_ckpt.extras.update(extras)
    last_ckpt = _snapshot(model, system, config, adam, config.epochs, best_loss, extras)
    return TrainOutcome(best=best_ckpt, last=last_ckpt, curve=curve)


def train_baseline(kind: str, recordings: Sequence[Recording], config: ModelConfig,
                   log=None) -> TrainOutcome:
    """Train one of the deterministic reference systems (stl or mtl_pu)."""
    if kind not in ("stl", "mtl_pu"):
        raise TrainingError(f"baseline kind must be 'stl' or 'mtl_pu', got {kind!r}")
    model = build_model(config, kind=kind)
    return train(model, recordings, system=kind, config=config, log=log)


# ---------------------------------------------------------------------------
# baseline inference and tuning
# ---------------------------------------------------------------------------

def _filtered(seq: np.ndarray, config: ModelConfig) -> np.ndarray:
    return median_filter(seq, config.median_window)


def predict_baseline(model, waveform: np.ndarray) -> dict:
    """Median-filtered predictions for a deterministic baseline.

    STL yields only the mean estimate. The multi-task model yields the
    spread estimate and the tuned mean m + beta * (s - mean(s)).
    """
    config = model.config
    with ad.no_grad():
        feats = model_features(model, waveform)
        if isinstance(model, STLModel):
            return {"m_hat": _filtered(model.head(feats).data, config)}
        if isinstance(model, MTLPUModel):
            m_hat = _filtered(model.head_m(feats).data, config)
            s_hat = _filtered(model.head_s(feats).data, config)
            m_adj = m_hat + model.beta * (s_hat - s_hat.mean())
            return {"m_hat": m_adj, "s_hat": s_hat}
    raise TrainingError(f"predict_baseline got unsupported model {type(model).__name__}")


def _fit_mtl_beta(model: MTLPUModel, data: Sequence[_RecordingArrays]) -> float:
    """Least-squares fit of the tuning scalar on the train split:
    regress the mean-head residual on the centered spread estimate."""
    num = 0.0
    den = 0.0
    with ad.no_grad():
        for rec in data:
            feats = model_features(model, rec.waveform)
            m_hat = _filtered(model.head_m(feats).data, model.config)
            s_hat = _filtered(model.head_s(feats).data, model.config)
            z = s_hat - s_hat.mean()
            r = rec.m - m_hat
            num += float(np.dot(r, z))
            den += float(np.dot(z, z))
    return num / den if den > 0 else 0.0
