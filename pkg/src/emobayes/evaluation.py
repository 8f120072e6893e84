"""Per-recording evaluation, report files, and system comparison.

For every recording of a split the evaluated system produces
median-filtered predictions; the report carries per-recording and
macro-averaged concordance on the label mean, concordance on the label
spread, and the mean per-frame Gaussian KL from the annotation
distribution to the predicted one. The single-task baseline has no
spread estimate, so its spread and KL entries stay empty. Comparison
between two systems runs paired one-tailed t-tests across recordings
in both directions at the 0.05 significance level.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from emobayes.dataset import Recording
from emobayes.labels import S_MIN, label_distribution
from emobayes.metrics import ccc, gaussian_kl, paired_t_test_one_tailed
from emobayes.model import MTLPUModel, STLModel, UncertaintyModel, predict_distribution
from emobayes.training import Checkpoint, model_from_checkpoint, predict_baseline

__all__ = [
    "EvalError",
    "EvalReport",
    "SIGNIFICANCE_LEVEL",
    "REPORT_COLUMNS",
    "evaluate",
    "evaluate_checkpoint",
    "write_report",
    "read_recording_rows",
    "compare_reports",
]

SIGNIFICANCE_LEVEL = 0.05
REPORT_COLUMNS = ("system", "recording_id", "ccc_m", "ccc_s", "kl")

# Metrics where larger is better; the KL metric improves downward.
_HIGHER_IS_BETTER = {"ccc_m": True, "ccc_s": True, "kl": False}


class EvalError(ValueError):
    """Evaluation misuse: empty split, mismatched reports."""


@dataclass
class EvalReport:
    system: str
    split: str
    rows: list
    summary: dict
    predictions: dict = field(default_factory=dict)


def _kl_metric(label_m, label_s, m_hat, s_hat) -> float:
    s_hat = np.maximum(s_hat, S_MIN)
    values = [gaussian_kl((label_m[t], label_s[t]), (m_hat[t], s_hat[t]))
              for t in range(label_m.size)]
    return float(np.mean(values))


def evaluate(model, recordings: Sequence[Recording], split: str,
             seed: Optional[int] = None, n: Optional[int] = None,
             export_samples: bool = False) -> EvalReport:
    """Evaluate one trained system over a split.

    Stochastic inference seeds derive from (config seed, recording
    index) so repeated evaluation of the same checkpoint is
    byte-identical.
    """
    recordings = [r for r in recordings if r.split == split]
    if not recordings:
        raise EvalError(f"split {split!r} is empty")
    recordings = sorted(recordings, key=lambda r: r.recording_id)
    config = model.config
    base_seed = config.seed if seed is None else seed
    system = getattr(model, "system", None) or model.kind

    rows = []
    predictions = {}
    for index, rec in enumerate(recordings):
        dist = label_distribution(rec.trace)
        if isinstance(model, UncertaintyModel):
            pred = predict_distribution(model, rec.waveform, n=n,
                                        seed=int(np.random.SeedSequence(
                                            [base_seed, 20, index]).generate_state(1)[0]))
            m_hat, s_hat = pred.m_hat, pred.s_hat
            samples = pred.samples if export_samples else None
        elif isinstance(model, (STLModel, MTLPUModel)):
            out = predict_baseline(model, rec.waveform)
            m_hat = out["m_hat"]
            s_hat = out.get("s_hat")
            samples = None
        else:
            raise EvalError(f"cannot evaluate model type {type(model).__name__}")

        row = {"system": system, "recording_id": rec.recording_id,
               "ccc_m": ccc(m_hat, dist.m), "ccc_s": None, "kl": None}
        if s_hat is not None:
            row["ccc_s"] = ccc(s_hat, dist.s)
            row["kl"] = _kl_metric(dist.m, dist.s, m_hat, s_hat)
        rows.append(row)
        predictions[rec.recording_id] = {
            "time_s": rec.trace.times, "m_hat": m_hat, "s_hat": s_hat, "samples": samples}

    def _macro(key):
        values = [r[key] for r in rows]
        if any(v is None for v in values):
            return None
        return float(np.mean(values))

    summary = {
        "system": system,
        "split": split,
        "n_recordings": len(rows),
        "ccc_m": _macro("ccc_m"),
        "ccc_s": _macro("ccc_s"),
        "kl": _macro("kl"),
    }
    return EvalReport(system=system, split=split, rows=rows, summary=summary,
                      predictions=predictions)


def evaluate_checkpoint(ckpt: Checkpoint, recordings: Sequence[Recording], split: str,
                        n: Optional[int] = None, export_samples: bool = False) -> EvalReport:
    model = model_from_checkpoint(ckpt)
    model.system = ckpt.system
    return evaluate(model, recordings, split, n=n, export_samples=export_samples)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


def write_report(report: EvalReport, report_dir, force: bool = False) -> dict:
    """Write the per-recording CSV, macro summary JSON, and one
    prediction CSV per recording. Returns the written paths."""
    report_dir = Path(report_dir)
    stem = f"{report.system}_{report.split}"
    rec_csv = report_dir / f"{stem}_recordings.csv"
    summary_json = report_dir / f"{stem}_summary.json"
    if (rec_csv.exists() or summary_json.exists()) and not force:
        raise EvalError(f"report files for {stem} exist in {report_dir}; use force/--force")
    report_dir.mkdir(parents=True, exist_ok=True)
    pred_dir = report_dir / "predictions"
    pred_dir.mkdir(exist_ok=True)

    lines = [",".join(REPORT_COLUMNS)]
    for row in report.rows:
        lines.append(",".join([row["system"], row["recording_id"],
                               _fmt(row["ccc_m"]), _fmt(row["ccc_s"]), _fmt(row["kl"])]))
    rec_csv.write_text("\n".join(lines) + "\n", encoding="utf-8")
    summary_json.write_text(json.dumps(report.summary, sort_keys=True, indent=2) + "\n",
                            encoding="utf-8")

    written = {"recordings": rec_csv, "summary": summary_json, "predictions": []}
    for rid, pred in report.predictions.items():
        path = pred_dir / f"{stem}_{rid}_pred.csv"
        rows = ["time_s,m_hat,s_hat"]
        s_hat = pred["s_hat"]
        for t in range(pred["time_s"].size):
            rows.append(",".join([
                repr(float(pred["time_s"][t])),
                repr(float(pred["m_hat"][t])),
                "" if s_hat is None else repr(float(s_hat[t])),
            ]))
        path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        written["predictions"].append(path)
        if pred.get("samples") is not None:
            samples = pred["samples"]
            wide = pred_dir / f"{stem}_{rid}_samples.csv"
            header = "time_s," + ",".join(f"sample_{i + 1}" for i in range(samples.shape[0]))
            body = [header]
            for t in range(samples.shape[1]):
                body.append(",".join([repr(float(pred["time_s"][t]))]
                                     + [repr(float(v)) for v in samples[:, t]]))
            wide.write_text("\n".join(body) + "\n", encoding="utf-8")
            written["predictions"].append(wide)
    return written


def read_recording_rows(path) -> list:
    """Read back a per-recording report CSV."""
    text = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not text or text[0] != ",".join(REPORT_COLUMNS):
        raise EvalError(f"{path}: expected header {','.join(REPORT_COLUMNS)!r}")
    rows = []
    for line in text[1:]:
        parts = line.split(",")
        if len(parts) != len(REPORT_COLUMNS):
            raise EvalError(f"{path}: bad row {line!r}")
        rows.append({
            "system": parts[0],
            "recording_id": parts[1],
            "ccc_m": float(parts[2]) if parts[2] else None,
            "ccc_s": float(parts[3]) if parts[3] else None,
            "kl": float(parts[4]) if parts[4] else None,
        })
    return rows


# ---------------------------------------------------------------------------
# significance comparison
# ---------------------------------------------------------------------------

def compare_reports(rows_a: Sequence[dict], rows_b: Sequence[dict],
                    level: float = SIGNIFICANCE_LEVEL) -> dict:
    """Paired one-tailed t-tests between two systems, both directions.

    Rows must cover identical recording sets; pairing is by
    recording_id. Metrics one side does not report are skipped.
    """
    by_id_a = {r["recording_id"]: r for r in rows_a}
    by_id_b = {r["recording_id"]: r for r in rows_b}
    if set(by_id_a) != set(by_id_b):
        raise EvalError("reports cover different recording sets: "
                        f"{sorted(set(by_id_a) ^ set(by_id_b))}")
    ids = sorted(by_id_a)
    system_a = rows_a[0]["system"] if rows_a else "a"
    system_b = rows_b[0]["system"] if rows_b else "b"

    metrics = {}
    for metric, higher_better in _HIGHER_IS_BETTER.items():
        a = [by_id_a[i][metric] for i in ids]
        b = [by_id_b[i][metric] for i in ids]
        if any(v is None for v in a) or any(v is None for v in b):
            metrics[metric] = None
            continue
        a = np.asarray(a)
        b = np.asarray(b)
        if higher_better:
            p_a_better = paired_t_test_one_tailed(a, b)
            p_b_better = paired_t_test_one_tailed(b, a)
        else:
            p_a_better = paired_t_test_one_tailed(b, a)
            p_b_better = paired_t_test_one_tailed(a, b)
        metrics[metric] = {
            "mean_a": float(a.mean()),
            "mean_b": float(b.mean()),
            "p_a_better": p_a_better,
            "p_b_better": p_b_better,
            "a_significant": bool(p_a_better <= level),
            "b_significant": bool(p_b_better <= level),
            "degenerate": bool(np.all(a == b)),
        }
    return {"system_a": system_a, "system_b": system_b, "level": level,
            "n_recordings": len(ids), "metrics": metrics}


def comparison_lines(result: dict) -> list:
    """Human-readable verdict lines, one per metric."""
    lines = []
    a, b = result["system_a"], result["system_b"]
    for metric, entry in result["metrics"].items():
        if entry is None:
            lines.append(f"{metric}: not comparable (missing on one side)")
            continue
        direction = "higher" if _HIGHER_IS_BETTER[metric] else "lower"
        verdict_a = "significant" if entry["a_significant"] else "not significant"
        verdict_b = "significant" if entry["b_significant"] else "not significant"
        flag = " [degenerate: identical scores]" if entry["degenerate"] else ""
        lines.append(
            f"{metric} ({direction} is better): {a}={entry['mean_a']:.4f} "
            f"{b}={entry['mean_b']:.4f}; {a} better p={entry['p_a_better']:.4g} "
            f"({verdict_a}), {b} better p={entry['p_b_better']:.4g} ({verdict_b}){flag}")
    return lines
