"""Synthetic corpus generation and audio/annotation ingestion.

The real corpus this pipeline targets is license-restricted, so the
generator manufactures recordings with the same shape statistics:
16 kHz mono audio, 40 ms frames, six annotators, arousal traces whose
corpus averages sit near mean 0.01 and spread 0.23. Each recording is
driven by a latent arousal trajectory; annotators see it through an
individual constant bias, slow smoothed noise, and a reaction lag of
up to one second, which makes the per-frame spread vary with how fast
the latent trace moves. The audio is a harmonic-plus-noise signal
whose amplitude and pitch track the latent trace.

Users holding real AVEC-style data can bypass the generator entirely:
``load_wav`` plus ``labels.load_annotation_csv`` accept the same file
layout the generator writes.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from emobayes.labels import (FRAME_PERIOD_S, AnnotationTrace, label_distribution,
                             load_annotation_csv, save_annotation_csv)

__all__ = [
    "SAMPLE_RATE",
    "FRAME_SAMPLES",
    "DatasetError",
    "CorpusSpec",
    "Recording",
    "desk_corpus_spec",
    "generate_corpus",
    "frame_waveform",
    "load_wav",
    "save_wav",
    "write_corpus",
    "read_manifest",
    "load_recording",
    "corpus_stats",
]

SAMPLE_RATE = 16000
FRAME_SAMPLES = int(round(SAMPLE_RATE * FRAME_PERIOD_S))  # 640

_MAX_LAG_FRAMES = 25


class DatasetError(ValueError):
    """Invalid corpus spec, audio file, or manifest."""


@dataclass(frozen=True)
class CorpusSpec:
    """Shape of a synthetic corpus; defaults mirror the published
    statistics of the reference dataset (9 + 9 recordings of 300 s,
    6 annotators, mean arousal 0.01, mean spread 0.23)."""

    n_train: int = 9
    n_dev: int = 9
    duration_s: float = 300.0
    annotators: int = 6
    seed: int = 7
    target_mean_of_m: float = 0.01
    target_mean_of_s: float = 0.23

    def __post_init__(self):
        if self.n_train < 1 or self.n_dev < 1:
            raise DatasetError("recording counts must be positive")
        if self.annotators < 2:
            raise DatasetError(f"need at least 2 annotators, got {self.annotators}")
        frames = self.duration_s / FRAME_PERIOD_S
        if abs(frames - round(frames)) > 1e-9 or frames < 1:
            raise DatasetError(f"duration {self.duration_s}s is not a positive multiple of "
                               f"{FRAME_PERIOD_S}s")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration_s / FRAME_PERIOD_S))

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "CorpusSpec":
        known = set(CorpusSpec.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DatasetError(f"unknown corpus spec keys: {sorted(unknown)}")
        return CorpusSpec(**d)


def desk_corpus_spec(**overrides) -> CorpusSpec:
    """30 s recordings, otherwise the default shape; fast enough for CI."""
    base = dict(duration_s=30.0)
    base.update(overrides)
    return CorpusSpec(**base)


@dataclass
class Recording:
    """One synthetic or ingested recording: waveform plus its trace."""

    waveform: np.ndarray
    trace: AnnotationTrace
    split: str
    recording_id: str

    def __post_init__(self):
        if self.waveform.size != self.trace.n_frames * FRAME_SAMPLES:
            raise DatasetError(
                f"{self.recording_id}: waveform has {self.waveform.size} samples, trace expects "
                f"{self.trace.n_frames * FRAME_SAMPLES}")
        if abs(self.trace.frame_period - FRAME_PERIOD_S) > 1e-9:
            raise DatasetError(f"{self.recording_id}: frame period {self.trace.frame_period}")


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _smoothed_noise(rng: np.random.Generator, n: int, window: int) -> np.ndarray:
    """Moving-average-smoothed white noise, normalized to unit std."""
    white = rng.standard_normal(n + window)
    kernel = np.ones(window) / window
    smooth = np.convolve(white, kernel, mode="full")[window:window + n]
    sd = smooth.std()
    return smooth / sd if sd > 0 else smooth


def _latent_trace(rng: np.random.Generator, n_frames: int, target_mean: float) -> np.ndarray:
    """Latent arousal: 3-6 low-frequency sinusoids plus slow noise,
    squashed into [-1, 1] and re-centered toward the corpus target."""
    t = np.arange(n_frames) * FRAME_PERIOD_S
    n_waves = int(rng.integers(3, 7))
    raw = np.zeros(n_frames)
    for _ in range(n_waves):
        freq = rng.uniform(0.05, 0.4)
        amp = rng.uniform(0.2, 0.6)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        raw += amp * np.sin(2.0 * np.pi * freq * t + phase)
    raw += 0.25 * _smoothed_noise(rng, n_frames, window=50)
    raw *= 0.35 / max(raw.std(), 1e-9)
    latent = np.tanh(raw)
    latent += target_mean + rng.uniform(-0.08, 0.08) - latent.mean()
    return np.clip(latent, -0.98, 0.98)


def _lagged(latent: np.ndarray, lag: int) -> np.ndarray:
    if lag == 0:
        return latent
    return np.concatenate([np.full(lag, latent[0]), latent[:-lag]])


def _annotator_traces(rng: np.random.Generator, latent: np.ndarray, annotators: int,
                      target_s: float) -> np.ndarray:
    """Per-annotator views of the latent trace, spread-calibrated.

    The lag component contributes a slope-dependent, time-varying part
    of the spread; the bias and slow-noise mixture is scaled so the
    recording-average spread lands on ``target_s``."""
    n_frames = latent.size
    lags = rng.integers(0, _MAX_LAG_FRAMES + 1, size=annotators)
    lagged = np.stack([_lagged(latent, int(lag)) for lag in lags])
    biases = rng.standard_normal(annotators)
    noise = np.stack([_smoothed_noise(rng, n_frames, window=50) for _ in range(annotators)])
    other = 0.6 * biases[:, None] + 0.8 * noise

    def mean_spread(scale: float) -> float:
        traces = lagged + scale * other
        return float(traces.std(axis=0, ddof=1).mean())

    target = target_s
    lo, hi = 0.0, 3.0
    if mean_spread(lo) >= target:
        scale = 0.0
    else:
        while mean_spread(hi) < target and hi < 50.0:
            hi *= 2.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if mean_spread(mid) < target:
                lo = mid
            else:
                hi = mid
        scale = 0.5 * (lo + hi)
    return np.clip((lagged + scale * other).T, -1.0, 1.0)


def _waveform(rng: np.random.Generator, latent: np.ndarray) -> np.ndarray:
    """Harmonic-plus-noise audio; amplitude and pitch track the latent."""
    n_frames = latent.size
    n_samples = n_frames * FRAME_SAMPLES
    frame_centers = (np.arange(n_frames) + 0.5) * FRAME_PERIOD_S
    sample_times = np.arange(n_samples) / SAMPLE_RATE
    latent01 = np.clip((latent + 1.0) / 2.0, 0.0, 1.0)
    f0 = np.interp(sample_times, frame_centers, 110.0 + 140.0 * latent01)
    amp = np.interp(sample_times, frame_centers, 0.12 + 0.75 * latent01)
    phase = 2.0 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    sig = (0.60 * np.sin(phase) + 0.25 * np.sin(2 * phase)
           + 0.10 * np.sin(3 * phase) + 0.05 * np.sin(4 * phase))
    sig = amp * sig + 0.05 * amp * rng.standard_normal(n_samples)
    peak = np.abs(sig).max()
    if peak > 0.97:
        sig *= 0.97 / peak
    return sig


def _generate_recording(spec: CorpusSpec, recording_id: str, split: str,
                        seed_key: list) -> tuple:
    rng = np.random.default_rng(np.random.SeedSequence(seed_key))
    latent = _latent_trace(rng, spec.n_frames, spec.target_mean_of_m)
    annotations = _annotator_traces(rng, latent, spec.annotators, spec.target_mean_of_s)
    waveform = _waveform(rng, latent)
    trace = AnnotationTrace(annotations, recording_id=recording_id)
    return Recording(waveform, trace, split, recording_id), latent


def generate_corpus(spec: CorpusSpec, with_latents: bool = False):
    """Generate the full train+dev corpus, deterministic in the seed.

    Per-recording RNG streams derive from (corpus seed, index), so
    recordings are independent and could be produced in any order.
    """
    recordings = []
    latents = []
    index = 0
    for split, count in (("train", spec.n_train), ("dev", spec.n_dev)):
        for i in range(count):
            rid = f"{split}_{i:02d}"
            rec, latent = _generate_recording(spec, rid, split, [spec.seed, index])
            recordings.append(rec)
            latents.append(latent)
            index += 1
    if with_latents:
        return recordings, latents
    return recordings


def corpus_stats(recordings) -> tuple:
    """(mean of per-frame label means, mean of per-frame spreads) over
    every frame of the corpus."""
    all_m = []
    all_s = []
    for rec in recordings:
        dist = label_distribution(rec.trace)
        all_m.append(dist.m)
        all_s.append(dist.s)
    return float(np.concatenate(all_m).mean()), float(np.concatenate(all_s).mean())


# ---------------------------------------------------------------------------
# framing and WAV I/O
# ---------------------------------------------------------------------------

def frame_waveform(waveform) -> np.ndarray:
    """Split a waveform into non-overlapping 640-sample frames (T, 640).

    A length that is not a multiple of 640 is zero-padded at the end,
    with a warning; an empty waveform is an error.
    """
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1 or waveform.size == 0:
        raise DatasetError(f"waveform must be non-empty 1-D, got shape {waveform.shape}")
    remainder = waveform.size % FRAME_SAMPLES
    if remainder:
        pad = FRAME_SAMPLES - remainder
        warnings.warn(f"waveform length {waveform.size} not a multiple of {FRAME_SAMPLES}; "
                      f"zero-padding {pad} samples", stacklevel=2)
        waveform = np.concatenate([waveform, np.zeros(pad)])
    return waveform.reshape(-1, FRAME_SAMPLES)


def load_wav(path) -> np.ndarray:
    """Read mono 16 kHz PCM16 or float32 WAV, scaled to [-1, 1]."""
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError) as exc:
        raise DatasetError(f"{path}: malformed WAV file ({exc})") from None
    if rate != SAMPLE_RATE:
        raise DatasetError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz "
                           "(no silent resampling)")
    if data.ndim != 1:
        raise DatasetError(f"{path}: {data.shape[1]} channels, expected mono")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.float32:
        return np.clip(data.astype(np.float64), -1.0, 1.0)
    raise DatasetError(f"{path}: unsupported sample format {data.dtype}, expected PCM16 or float32")


def save_wav(path, waveform: np.ndarray):
    """Write PCM16 mono at 16 kHz."""
    clipped = np.clip(np.asarray(waveform, dtype=np.float64), -1.0, 1.0)
    pcm = np.clip(np.round(clipped * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, SAMPLE_RATE, pcm)


# ---------------------------------------------------------------------------
# on-disk corpus layout: wav/ + csv/ + manifest.jsonl
# ---------------------------------------------------------------------------

def write_corpus(recordings, corpus_dir, spec: CorpusSpec, force: bool = False) -> Path:
    """Write WAV + annotation CSV per recording plus a JSON-lines manifest.

    Refuses to overwrite an existing manifest unless ``force``.
    """
    corpus_dir = Path(corpus_dir)
    manifest_path = corpus_dir / "manifest.jsonl"
    if manifest_path.exists() and not force:
        raise DatasetError(f"{manifest_path} exists; pass force=True (or --force) to regenerate")
    (corpus_dir / "wav").mkdir(parents=True, exist_ok=True)
    (corpus_dir / "csv").mkdir(parents=True, exist_ok=True)
    lines = []
    for index, rec in enumerate(recordings):
        wav_rel = f"wav/{rec.recording_id}.wav"
        csv_rel = f"csv/{rec.recording_id}.csv"
        save_wav(corpus_dir / wav_rel, rec.waveform)
        save_annotation_csv(rec.trace, corpus_dir / csv_rel)
        lines.append(json.dumps({
            "recording_id": rec.recording_id,
            "split": rec.split,
            "wav": wav_rel,
            "csv": csv_rel,
            "seed": [spec.seed, index],
        }, sort_keys=True))
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest_path


def read_manifest(corpus_dir) -> list:
    corpus_dir = Path(corpus_dir)
    manifest_path = corpus_dir / "manifest.jsonl"
    if not manifest_path.exists():
        raise DatasetError(f"no manifest at {manifest_path}; run corpus generation first")
    entries = []
    for lineno, line in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{manifest_path}:{lineno}: bad manifest line ({exc})") from None
        for key in ("recording_id", "split", "wav", "csv"):
            if key not in entry:
                raise DatasetError(f"{manifest_path}:{lineno}: manifest entry missing {key!r}")
        entries.append(entry)
    return entries


def load_recording(corpus_dir, entry: dict) -> Recording:
    corpus_dir = Path(corpus_dir)
    waveform = load_wav(corpus_dir / entry["wav"])
    trace = load_annotation_csv(corpus_dir / entry["csv"], recording_id=entry["recording_id"])
    return Recording(waveform, trace, entry["split"], entry["recording_id"])
