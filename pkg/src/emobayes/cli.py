"""Command-line pipeline: generate, train, evaluate, compare.

Runs are driven by a TOML config with section tables [dataset],
[model], [paths] and [compare]; every field has a default matching the
full-scale training recipe, and unknown keys are rejected. The
effective (defaults-merged) config is echoed into every output
directory so a run can be reproduced from its own artifacts.

Exit codes: 0 success, 1 validation error, 2 runtime failure. The
USER_CORPUS_DIR environment variable overrides the corpus path for
users holding real data in the same layout.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from emobayes.dataset import (CorpusSpec, DatasetError, corpus_stats, generate_corpus,
                              load_recording, read_manifest, write_corpus)
from emobayes.evaluation import (EvalError, comparison_lines, compare_reports,
                                 evaluate_checkpoint, read_recording_rows, write_report)
from emobayes.labels import LabelError
from emobayes.losses import LossError
from emobayes.metrics import MetricError
from emobayes.model import ConfigError, ModelConfig
from emobayes.training import (Checkpoint, TrainingError, build_model, system_alpha,
                               system_kind, train, SYSTEMS)
from emobayes import autodiff

__all__ = ["main", "RunConfig", "load_run_config", "emit_toml"]

_VALIDATION_ERRORS = (ConfigError, DatasetError, LabelError, LossError, MetricError, EvalError)


class CLIError(ValueError):
    """Bad command line or config file."""


@dataclass
class RunConfig:
    corpus: CorpusSpec
    model: ModelConfig
    corpus_dir: Path
    checkpoint_dir: Path
    report_dir: Path
    compare_systems: tuple = ("mu", "lu")

    def to_sections(self) -> dict:
        return {
            "dataset": self.corpus.to_dict(),
            "model": self.model.to_dict(),
            "paths": {
                "corpus_dir": str(self.corpus_dir),
                "checkpoint_dir": str(self.checkpoint_dir),
                "report_dir": str(self.report_dir),
            },
            "compare": {"systems": list(self.compare_systems)},
        }


def load_run_config(path=None, seed=None) -> RunConfig:
    """Parse a TOML run config; missing sections fall back to defaults."""
    sections = {}
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise CLIError(f"config file {path} does not exist")
        with open(path, "rb") as fh:
            try:
                sections = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise CLIError(f"{path}: invalid TOML ({exc})") from None
        base_dir = path.parent.resolve()
    unknown = set(sections) - {"dataset", "model", "paths", "compare"}
    if unknown:
        raise CLIError(f"unknown config sections: {sorted(unknown)}")

    corpus = CorpusSpec.from_dict(sections.get("dataset", {}))
    model = ModelConfig.from_dict(sections.get("model", {}))

    paths = dict(sections.get("paths", {}))
    unknown = set(paths) - {"corpus_dir", "checkpoint_dir", "report_dir"}
    if unknown:
        raise CLIError(f"unknown [paths] keys: {sorted(unknown)}")
    corpus_dir = Path(paths.get("corpus_dir", "corpus"))
    checkpoint_dir = Path(paths.get("checkpoint_dir", "checkpoints"))
    report_dir = Path(paths.get("report_dir", "reports"))

    compare = dict(sections.get("compare", {}))
    unknown = set(compare) - {"systems"}
    if unknown:
        raise CLIError(f"unknown [compare] keys: {sorted(unknown)}")
    systems = tuple(compare.get("systems", ("mu", "lu")))
    for s in systems:
        if s not in SYSTEMS:
            raise CLIError(f"[compare] unknown system {s!r}, expected one of {SYSTEMS}")
    if len(systems) != 2:
        raise CLIError("[compare] systems must list exactly two system names")

    env_corpus = os.environ.get("USER_CORPUS_DIR")
    if env_corpus:
        corpus_dir = Path(env_corpus)

    def resolve(p: Path) -> Path:
        return p if p.is_absolute() else base_dir / p

    if seed is not None:
        corpus = dataclasses.replace(corpus, seed=seed)
        model = dataclasses.replace(model, seed=seed)
    return RunConfig(corpus=corpus, model=model, corpus_dir=resolve(corpus_dir),
                     checkpoint_dir=resolve(checkpoint_dir), report_dir=resolve(report_dir),
                     compare_systems=systems)


# ---------------------------------------------------------------------------
# TOML echo
# ---------------------------------------------------------------------------

def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise CLIError(f"cannot serialize config value {value!r}")


def emit_toml(config: RunConfig) -> str:
    lines = []
    for section, table in config.to_sections().items():
        lines.append(f"[{section}]")
        for key, value in table.items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def _echo_config(config: RunConfig, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.toml").write_text(emit_toml(config), encoding="utf-8")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _load_split(config: RunConfig, split: str) -> list:
    entries = read_manifest(config.corpus_dir)
    return [load_recording(config.corpus_dir, e) for e in entries if e["split"] == split]


def cmd_generate(config: RunConfig, force: bool, duration_s=None) -> int:
    spec = config.corpus
    if duration_s is not None:
        spec = dataclasses.replace(spec, duration_s=duration_s)
    recordings = generate_corpus(spec)
    manifest = write_corpus(recordings, config.corpus_dir, spec, force=force)
    _echo_config(dataclasses.replace(config, corpus=spec), config.corpus_dir)
    mean_m, mean_s = corpus_stats(recordings)
    print(f"wrote {len(recordings)} recordings ({spec.n_train} train + {spec.n_dev} dev, "
          f"{spec.duration_s:g}s each) to {manifest.parent}")
    print(f"corpus stats: mean of label means = {mean_m:.4f}, mean of label spreads = {mean_s:.4f}")
    return 0


def cmd_train(config: RunConfig, system: str, force: bool) -> int:
    model_cfg = dataclasses.replace(config.model, alpha=system_alpha(system, config.model))
    best_path = config.checkpoint_dir / f"{system}_best.npz"
    last_path = config.checkpoint_dir / f"{system}_last.npz"
    curve_path = config.checkpoint_dir / f"{system}_losses.csv"
    for p in (best_path, last_path, curve_path):
        if p.exists() and not force:
            raise CLIError(f"{p} exists; pass --force to retrain")
    train_recs = _load_split(config, "train")
    if not train_recs:
        raise DatasetError(f"no train recordings in {config.corpus_dir}")
    model = build_model(model_cfg, kind=system_kind(system))
    outcome = train(model, train_recs, system=system, config=model_cfg, log=print)
    outcome.best.save(best_path)
    outcome.last.save(last_path)
    lines = ["epoch,ccc_term,bbb_term,kl_term,total"]
    for row in outcome.curve:
        lines.append(",".join([str(row["epoch"])] + [repr(float(row[k]))
                     for k in ("ccc_term", "bbb_term", "kl_term", "total")]))
    curve_path.parent.mkdir(parents=True, exist_ok=True)
    curve_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    _echo_config(dataclasses.replace(config, model=model_cfg), config.checkpoint_dir)
    print(f"saved best checkpoint (epoch {outcome.best.epoch}, "
          f"train loss {outcome.best.best_loss:.6f}) to {best_path}")
    return 0


def cmd_evaluate(config: RunConfig, checkpoint: str, split: str, force: bool,
                 allow_mismatch: bool, export_samples: bool) -> int:
    ckpt = Checkpoint.load(checkpoint)
    expected = dataclasses.replace(
        config.model, alpha=system_alpha(ckpt.system, config.model)).config_hash()
    if ckpt.config_hash != expected:
        print(f"warning: checkpoint config hash {ckpt.config_hash} does not match the "
              f"run config ({expected})", file=sys.stderr)
        if not allow_mismatch:
            raise CLIError("config mismatch; pass --allow-mismatch to evaluate anyway")
    recordings = _load_split(config, split)
    if not recordings:
        raise EvalError(f"split {split!r} is empty in {config.corpus_dir}")
    report = evaluate_checkpoint(ckpt, recordings, split, export_samples=export_samples)
    stem = f"{report.system}_{split}"
    if (config.report_dir / f"{stem}_recordings.csv").exists() and not force:
        raise CLIError(f"report for {stem} exists in {config.report_dir}; pass --force")
    write_report(report, config.report_dir, force=force)
    _echo_config(config, config.report_dir)
    s = report.summary
    def show(v):
        return "-" if v is None else f"{v:.4f}"
    print(f"{s['system']} on {split}: ccc_m={show(s['ccc_m'])} ccc_s={show(s['ccc_s'])} "
          f"kl={show(s['kl'])} over {s['n_recordings']} recordings")
    return 0


def cmd_compare(config: RunConfig, report_a, report_b, split: str, force: bool) -> int:
    if report_a is None or report_b is None:
        sys_a, sys_b = config.compare_systems
        report_a = config.report_dir / f"{sys_a}_{split}_recordings.csv"
        report_b = config.report_dir / f"{sys_b}_{split}_recordings.csv"
    rows_a = read_recording_rows(report_a)
    rows_b = read_recording_rows(report_b)
    result = compare_reports(rows_a, rows_b)
    for line in comparison_lines(result):
        print(line)
    out = config.report_dir / f"compare_{result['system_a']}_vs_{result['system_b']}.json"
    if out.exists() and not force:
        raise CLIError(f"{out} exists; pass --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)
    import json
    out.write_text(json.dumps(result, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


def _build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=None,
                        help="TOML run config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, default=None,
                        help="override every stochastic component's seed")
    common.add_argument("--force", action="store_true",
                        help="allow overwriting existing outputs")
    common.add_argument("--allow-mismatch", action="store_true",
                        help="evaluate despite a checkpoint/config hash mismatch")

    parser = _Parser(prog="emobayes",
                     description="Label-uncertainty arousal pipeline: synthetic corpus, "
                                 "Bayesian training, evaluation, significance comparison.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write the synthetic corpus")
    p.add_argument("--duration-s", type=float, default=None,
                   help="override per-recording duration in seconds")

    p = sub.add_parser("train", parents=[common], help="train one system")
    p.add_argument("system", choices=SYSTEMS)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint on a split")
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=("train", "dev"), default="dev")
    p.add_argument("--export-samples", action="store_true",
                   help="also write per-sample wide CSVs for plotting")

    p = sub.add_parser("compare", parents=[common],
                       help="paired one-tailed significance tests between two reports")
    p.add_argument("report_a", nargs="?", default=None)
    p.add_argument("report_b", nargs="?", default=None)
    p.add_argument("--split", choices=("train", "dev"), default="dev")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        config = load_run_config(args.config, seed=args.seed)
        if args.command == "generate":
            return cmd_generate(config, force=args.force, duration_s=args.duration_s)
        if args.command == "train":
            return cmd_train(config, system=args.system, force=args.force)
        if args.command == "evaluate":
            return cmd_evaluate(config, checkpoint=args.checkpoint, split=args.split,
                                force=args.force, allow_mismatch=args.allow_mismatch,
                                export_samples=args.export_samples)
        if args.command == "compare":
            return cmd_compare(config, report_a=args.report_a, report_b=args.report_b,
                               split=args.split, force=args.force)
        raise CLIError(f"unknown command {args.command!r}")
    except (CLIError, *_VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, autodiff.AutodiffError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
