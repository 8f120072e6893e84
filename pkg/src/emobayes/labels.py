"""Multi-annotator label model for time-continuous arousal traces.

Each recording carries one annotation row per 40 ms frame from ``a``
annotators. The regression target is the per-frame mean across
annotators; the label-uncertainty target is the per-frame unbiased
standard deviation ("perception uncertainty"). Together they define a
per-frame Gaussian over plausible annotations.

No evaluator weighting is applied anywhere, and ingestion performs no
local normalization or mean filtering of the traces; traces are used
as stored.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AnnotationTrace",
    "GaussianLabel",
    "LabelError",
    "S_MIN",
    "FRAME_PERIOD_S",
    "mean_annotation",
    "perception_uncertainty",
    "label_distribution",
    "load_annotation_csv",
    "save_annotation_csv",
]

# Floor applied to label standard deviations before any KL computation;
# keeps the divergence finite when annotators agree exactly.
S_MIN = 1e-3

FRAME_PERIOD_S = 0.04

# Values this far outside [-1, 1] are treated as corrupt rather than as
# trace-rounding artifacts.
_CLAMP_LIMIT = 1.5


class LabelError(ValueError):
    """Invalid annotation data (bad shape, range, or file contents)."""


@dataclass(frozen=True)
class AnnotationTrace:
    """Per-frame annotations from ``a`` annotators for one recording.

    ``annotations`` has shape (frames, annotators) with values in
    [-1, 1]. Immutable after construction; at least two annotators are
    required because the unbiased deviation divides by a - 1.
    """

    annotations: np.ndarray
    recording_id: str = ""
    frame_period: float = FRAME_PERIOD_S

    def __post_init__(self):
        arr = np.array(self.annotations, dtype=np.float64)
        if arr.ndim != 2:
            raise LabelError(f"annotations must be 2-D (frames, annotators), got shape {arr.shape}")
        if arr.shape[1] < 2:
            raise LabelError(f"need at least 2 annotators, got {arr.shape[1]}")
        if not np.all(np.isfinite(arr)):
            raise LabelError("annotations contain non-finite values")
        if np.any(np.abs(arr) > 1.0):
            raise LabelError("annotations outside [-1, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "annotations", arr)

    @property
    def n_frames(self) -> int:
        return self.annotations.shape[0]

    @property
    def n_annotators(self) -> int:
        return self.annotations.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_frames) * self.frame_period


@dataclass(frozen=True)
class GaussianLabel:
    """Per-frame N(m_t, s_t) over annotations; s is floored at S_MIN."""

    m: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        s = np.asarray(self.s, dtype=np.float64)
        if m.shape != s.shape:
            raise LabelError(f"mean/std shapes differ: {m.shape} vs {s.shape}")
        if np.any(s < 0):
            raise LabelError("negative label standard deviation")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "s", s)


def mean_annotation(trace: AnnotationTrace) -> np.ndarray:
    """Ground-truth label: plain per-frame mean over all annotators."""
    return trace.annotations.mean(axis=1)


def perception_uncertainty(trace: AnnotationTrace) -> np.ndarray:
    """Per-frame unbiased standard deviation across annotators."""
    a = trace.n_annotators
    if a < 2:
        raise LabelError(f"perception uncertainty needs >= 2 annotators, got {a}")
    m = trace.annotations.mean(axis=1, keepdims=True)
    dev = trace.annotations - m
    return np.sqrt((dev * dev).sum(axis=1) / (a - 1))


def label_distribution(trace: AnnotationTrace) -> GaussianLabel:
    """Per-frame Gaussian label with the deviation floored at S_MIN."""
    return GaussianLabel(mean_annotation(trace), np.maximum(perception_uncertainty(trace), S_MIN))


# ---------------------------------------------------------------------------
# CSV ingestion (schema: header time_s,ann_1,...,ann_a; one row per 40 ms)
# ---------------------------------------------------------------------------

def load_annotation_csv(path, recording_id: str = "") -> AnnotationTrace:
    """Read an annotation trace, validating schema and timing.

    Rows must advance the time column by a constant 40 ms step. Values
    slightly outside [-1, 1] (up to |1.5|) are clamped with a warning
    naming the offending line; anything further out, a malformed row,
    or a time gap raises ``LabelError`` with the line number.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LabelError(f"{path}: empty file") from None
        if len(header) < 3 or header[0] != "time_s":
            raise LabelError(f"{path}: bad header {header!r}, expected time_s,ann_1,...,ann_a")
        expected = ["ann_%d" % (i + 1) for i in range(len(header) - 1)]
        if header[1:] != expected:
            raise LabelError(f"{path}: bad annotator columns {header[1:]!r}, expected {expected!r}")
        n_ann = len(header) - 1

        times = []
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != n_ann + 1:
                raise LabelError(f"{path}:{lineno}: expected {n_ann + 1} fields, got {len(row)}")
            try:
                values = [float(v) for v in row]
            except ValueError:
                raise LabelError(f"{path}:{lineno}: non-numeric field in {row!r}") from None
            t, anns = values[0], values[1:]
            for v in anns:
                if abs(v) > _CLAMP_LIMIT:
                    raise LabelError(f"{path}:{lineno}: annotation {v} far outside [-1, 1]")
            clamped = [min(1.0, max(-1.0, v)) for v in anns]
            if clamped != anns:
                warnings.warn(f"{path}:{lineno}: annotation values clamped to [-1, 1]", stacklevel=2)
            times.append(t)
            rows.append(clamped)

    if not rows:
        raise LabelError(f"{path}: no annotation rows")
    times_arr = np.asarray(times)
    steps = np.diff(times_arr)
    bad = np.nonzero(np.abs(steps - FRAME_PERIOD_S) > 1e-9)[0]
    if bad.size:
        lineno = int(bad[0]) + 3  # header is line 1, first data row line 2
        raise LabelError(
            f"{path}:{lineno}: time step {steps[bad[0]]:.6f}s, expected constant {FRAME_PERIOD_S}s")
    return AnnotationTrace(np.asarray(rows), recording_id=recording_id)


def save_annotation_csv(trace: AnnotationTrace, path):
    """Write a trace in the ingestion schema with round-trip-exact floats."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s"] + ["ann_%d" % (i + 1) for i in range(trace.n_annotators)])
        for t in range(trace.n_frames):
            row = [repr(t * trace.frame_period)]
            row += [repr(float(v)) for v in trace.annotations[t]]
            writer.writerow(row)
