"""Command-line front end.

Verbs:
  attack  <config.yaml>        train the backdoor and write the run tree
  defend  <run-dir>            run the defense suite against a finished run
  gallery <run-dir> [--n N]    regenerate saliency galleries from checkpoints
  report  <run-dir>            print the run's report tables

Failures print a single machine-readable JSON record to stderr and exit
nonzero: 2 config errors, 3 data errors, 4 checkpoint errors, 5 other
package errors, 1 anything unexpected.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import load_config
from .errors import CheckpointError, ConfigError, DataError, SaliencyBackdoorError
from .experiment import (
    build_dataset,
    read_defense_csv,
    run_attack_experiment,
    run_defense_suite,
    split_for,
)
from .gallery import dump_saliency_gallery
from .metrics import read_report_csv

_EXIT_CODES = (
    (ConfigError, 2),
    (DataError, 3),
    (CheckpointError, 4),
    (SaliencyBackdoorError, 5),
)


def _cmd_attack(args) -> int:
    config = load_config(args.config)
    artifacts = run_attack_experiment(config)
    print(f"run written to {artifacts.run_dir}")
    print(f"config digest {config.digest}")
    return 0


def _cmd_defend(args) -> int:
    artifacts = run_defense_suite(args.run_dir, checkpoint=args.checkpoint)
    print(f"defense results written to {artifacts.defense_dir}")
    print(
        f"activation clustering: rate {artifacts.clustering.misclustering_rate:.2f}% "
        f"({artifacts.clustering.bin})"
    )
    return 0


def _cmd_gallery(args) -> int:
    run_dir = Path(args.run_dir)
    config = load_config(run_dir / "config.yaml")
    model = load_checkpoint(run_dir / "checkpoints" / "attacked.ckpt")
    dataset = build_dataset(config)
    if dataset.images.ndim != 4:
        raise DataError("galleries need image data; this run trains on feature vectors")
    _, val = split_for(config, dataset)
    paths = dump_saliency_gallery(
        model,
        val.images[: args.n],
        config.interpreter_specs(),
        config.trigger_pattern(),
        run_dir / "galleries",
    )
    for method, path in sorted(paths.items()):
        print(f"{method}: {path}")
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    reports_dir = run_dir / "reports"
    if not reports_dir.is_dir():
        raise DataError(f"{run_dir} has no reports directory; run the attack stage first")
    print(f"{'report':<34} {'fsr%':>8} {'cr%':>8} {'top1%':>8} {'top5%':>8}")
    for path in sorted(reports_dir.glob("*.csv")):
        report = read_report_csv(path)
        fmt = lambda v: f"{v:8.2f}" if v is not None else f"{'-':>8}"
        print(f"{path.stem:<34} {fmt(report.fsr_percent)} {fmt(report.cr_percent)} {fmt(report.top1)} {fmt(report.top5)}")
    defense_dir = run_dir / "defense"
    if defense_dir.is_dir():
        for name in ("clustering", "pruning", "denoise"):
            path = defense_dir / f"{name}.csv"
            if not path.is_file():
                continue
            rows = read_defense_csv(path)
            print(f"\n{name}:")
            if rows:
                columns = list(rows[0].keys())
                print("  " + "  ".join(columns))
                for row in rows:
                    print("  " + "  ".join(_short(row[c]) for c in columns))
    return 0


def _short(value: str) -> str:
    try:
        return f"{float(value):.3f}"
    except ValueError:
        return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saliency-backdoor",
        description="Train and evaluate backdoors against saliency-based model interpretation.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    attack = sub.add_parser("attack", help="train a backdoor from a config file")
    attack.add_argument("config", help="path to a YAML experiment config")
    attack.set_defaults(func=_cmd_attack)

    defend = sub.add_parser("defend", help="run the defense suite against a run directory")
    defend.add_argument("run_dir", help="directory written by the attack verb")
    defend.add_argument(
        "--checkpoint",
        choices=("attacked", "reference"),
        default="attacked",
        help="which checkpoint to defend (default: attacked)",
    )
    defend.set_defaults(func=_cmd_defend)

    gallery = sub.add_parser("gallery", help="regenerate saliency galleries for a run")
    gallery.add_argument("run_dir")
    gallery.add_argument("--n", type=int, default=8, help="number of validation images to show")
    gallery.set_defaults(func=_cmd_gallery)

    report = sub.add_parser("report", help="print a run's report tables")
    report.add_argument("run_dir")
    report.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # every failure becomes one machine-readable record
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        for err_type, code in _EXIT_CODES:
            if isinstance(exc, err_type):
                return code
        return 1


if __name__ == "__main__":
    sys.exit(main())
