"""Command-line entry point for the incremental intrusion-detection benchmark.

Subcommands:
    run-online   initial training plus test/feed-back rounds
    run-offline  one-batch baseline on an online run's training multiset
    predict      classify an NSL-KDD file with a saved engine
    inspect      show node counts, SVM sizes and parameters of a saved engine

Exit codes: 0 success, 1 data error, 2 config error, 3 internal error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from dotenv import load_dotenv

from engine import ConfigError, DetectionEngine, EngineError, SnapshotCorruptedError, SnapshotVersionError
from harness import (
    REPORT_FORMATS,
    ExperimentConfig,
    InvariantViolation,
    emit_report,
    format_table,
    offline_from_ledger,
    run_online_experiment,
)
from nslkdd_data import DataError, encode_records, parse_nslkdd, save_schema
from soinn import SoinnError
from svm import SvmError
from training_ledger import TrainingLedger

# Load environment variables (NIDS_* overrides, see .env.example)
load_dotenv()

EXIT_OK = 0
EXIT_DATA = 1
EXIT_CONFIG = 2
EXIT_INTERNAL = 3

ENGINE_FILE = "engine.json"
LEDGER_FILE = "training_ledger.json"
SCHEMA_FILE = "schema.json"


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    return ExperimentConfig.load(
        args.config,
        overrides={"seed": args.seed, "report_format": args.report, "out_dir": args.out},
    )


def cmd_run_online(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out_dir = Path(config.out_dir)
    run = run_online_experiment(config)

    report_path = emit_report(run.reports, config.report_format, out_dir / f"online_report.{config.report_format}")
    run.engine.save(out_dir / ENGINE_FILE)
    run.ledger.save(out_dir / LEDGER_FILE)
    save_schema(run.data.schema, out_dir / SCHEMA_FILE)

    print(format_table(run.reports))
    print(f"Report: {report_path}")
    print(f"Engine snapshot: {out_dir / ENGINE_FILE}")
    print(f"Training ledger: {out_dir / LEDGER_FILE} (digest {run.ledger.digest[:16]})")
    return EXIT_OK


def cmd_run_offline(args: argparse.Namespace) -> int:
    config = _load_config(args)
    ledger = TrainingLedger.load(args.training_digest)
    reports = offline_from_ledger(config, ledger)

    report_path = emit_report(
        reports, config.report_format, Path(config.out_dir) / f"offline_report.{config.report_format}"
    )
    print(format_table(reports))
    print(f"Report: {report_path}")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    engine = DetectionEngine.load(args.model)
    if engine.schema is None:
        raise ConfigError(f"{args.model} has no dataset schema; cannot encode raw records")
    records = parse_nslkdd(args.input)
    predictions = engine.predict_many(encode_records(records, engine.schema))

    print("\t".join(["line", "class", *(f"score_{c}" for c in engine.classes)]))
    for record, prediction in zip(records, predictions):
        scores = [
            "nan" if prediction.scores[c] == float("-inf") else f"{prediction.scores[c]:.6f}"
            for c in engine.classes
        ]
        print("\t".join([str(record.line), prediction.label, *scores]))
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    engine = DetectionEngine.load(args.model)
    print(json.dumps(engine.summary(), indent=2, ensure_ascii=False))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Override the experiment seed")
    common.add_argument("--report", choices=REPORT_FORMATS, default=None, help="Report format")
    common.add_argument("--out", default=None, help="Output directory")
    common.add_argument("-v", "--verbose", action="count", default=0, help="More logging (-vv for debug)")

    parser = argparse.ArgumentParser(
        prog="soinn-nids",
        description="Online incremental intrusion detection with n-SOINN pairs and SVMs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    online = sub.add_parser("run-online", parents=[common], help="Run the incremental round protocol")
    online.add_argument("--config", required=True, help="Experiment config (JSON)")
    online.set_defaults(handler=cmd_run_online)

    offline = sub.add_parser("run-offline", parents=[common], help="Run the one-batch baseline")
    offline.add_argument("--config", required=True, help="Experiment config (JSON)")
    offline.add_argument("--training-digest", required=True, help="Training ledger written by run-online")
    offline.set_defaults(handler=cmd_run_offline)

    predict = sub.add_parser("predict", parents=[common], help="Classify an NSL-KDD file")
    predict.add_argument("--model", required=True, help="Engine snapshot")
    predict.add_argument("--input", required=True, help="NSL-KDD records")
    predict.set_defaults(handler=cmd_predict)

    inspect = sub.add_parser("inspect", parents=[common], help="Summarize an engine snapshot")
    inspect.add_argument("--model", required=True, help="Engine snapshot")
    inspect.set_defaults(handler=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        return args.handler(args)
    except ConfigError as e:
        print(f"Config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SnapshotVersionError, SnapshotCorruptedError, OSError, UnicodeDecodeError) as e:
        print(f"Data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (InvariantViolation, EngineError, SoinnError, SvmError) as e:
        print(f"Internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
