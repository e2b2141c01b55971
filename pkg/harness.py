"""Validation, updating and experiment workflow.

Runs the incremental protocol: fit the schema and train on the initial set,
then for every round predict the round subset, validate against the true
labels and feed only the failed predictions back. The offline baseline
trains a fresh engine once on the same training multiset.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from engine import ConfigError, DetectionEngine, EngineConfig, EngineError, Prediction
from nslkdd_data import (
    DEFAULT_ATTACK_MAP,
    AttackCategoryMap,
    ClassLabel,
    DataError,
    DatasetSchema,
    LabeledSample,
    RawRecord,
    class_counts,
    encode_many,
    fit_schema,
    load_attack_mapping,
    map_attack_category,
    multiset_digest,
    parse_nslkdd,
    split_rounds,
    stratified_subsample,
)
from training_ledger import INITIAL, TrainingLedger

logger = logging.getLogger(__name__)

REPORT_FORMATS = ("json", "csv")
REPORT_COLUMNS = ("round", "accuracy_pct", "time_s", "cumulative_samples", "failures", "fraction_of_total")

# Environment variables (read after load_dotenv) -> config keys
ENV_OVERRIDES = {
    "NIDS_INITIAL_PATH": "initial_path",
    "NIDS_ROUNDS_PATH": "rounds_path",
    "NIDS_ATTACK_MAP": "attack_map_path",
    "NIDS_OUT_DIR": "out_dir",
    "NIDS_SEED": "seed",
}


class InvariantViolation(AssertionError):
    """Raised when protocol bookkeeping contradicts itself."""


# =============================================================================
# Configuration
# =============================================================================


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one online/offline experiment needs.

    Attributes:
        initial_path: NSL-KDD file used for initial training.
        rounds_path: NSL-KDD file split into the update rounds.
        rounds: Number of update rounds r.
        initial_size / round_size: Desk-scale stratified subsample sizes
            (None uses whole files; round_size is per round).
        shuffle: Shuffle the round records (with seed) before splitting.
        timing: Record wall time; when False time_s is written as 0.0.
    """

    initial_path: str
    rounds_path: str
    attack_map_path: str = str(DEFAULT_ATTACK_MAP)
    rounds: int = 5
    seed: int = 0
    shuffle: bool = False
    initial_size: int | None = None
    round_size: int | None = None
    unknown_label_policy: str = "error"
    fallback_class: str | None = None
    report_format: str = "csv"
    out_dir: str = "results"
    timing: bool = True
    engine: EngineConfig = field(default_factory=EngineConfig)

    def __post_init__(self):
        if not self.initial_path or not self.rounds_path:
            raise ConfigError("initial_path and rounds_path must be non-empty")
        if not self.out_dir:
            raise ConfigError("out_dir must be non-empty")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        for key in ("initial_size", "round_size"):
            value = getattr(self, key)
            if value is not None and value < 1:
                raise ConfigError(f"{key} must be >= 1, got {value}")
        if self.report_format not in REPORT_FORMATS:
            raise ConfigError(
                f"report_format '{self.report_format}' not supported. "
                f"Supported: {', '.join(REPORT_FORMATS)}"
            )
        if self.unknown_label_policy not in AttackCategoryMap.POLICIES:
            raise ConfigError(f"unknown_label_policy '{self.unknown_label_policy}' not supported")
        if self.unknown_label_policy == "fallback" and self.fallback_class not in self.engine.classes:
            raise ConfigError(f"fallback_class '{self.fallback_class}' is not an engine class")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ExperimentConfig:
        """Build a config from a mapping, rejecting unknown keys.

        Raises:
            ConfigError: On unknown keys or invalid values.
        """
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown config keys: {sorted(unknown)}")
        if "initial_path" not in data or "rounds_path" not in data:
            raise ConfigError("Config must set initial_path and rounds_path")
        engine_data = dict(data.pop("engine", {}))
        try:
            for key in ("rounds", "seed"):
                if key in data:
                    data[key] = int(data[key])
            engine_data.setdefault("seed", data.get("seed", 0))
            for key in ("initial_size", "round_size"):
                if data.get(key) is not None:
                    data[key] = int(data[key])
            for key in ("shuffle", "timing"):
                if key in data and not isinstance(data[key], bool):
                    raise ConfigError(f"{key} must be true or false, got {data[key]!r}")
            return cls(engine=EngineConfig.from_dict(engine_data), **data)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"Invalid config: {e}") from e

    @classmethod
    def load(
        cls,
        path: str | Path,
        environ: Mapping[str, str] | None = None,
        overrides: Mapping[str, Any] | None = None,
    ) -> ExperimentConfig:
        """Load a JSON config; environment variables, then overrides, take precedence.

        Raises:
            ConfigError: If the file is missing, not JSON, or invalid.
        """
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file {path} not found")
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise ConfigError(f"Invalid JSON format in {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")

        environ = os.environ if environ is None else environ
        changed = {key: environ[var] for var, key in ENV_OVERRIDES.items() if environ.get(var)}
        changed.update({key: value for key, value in (overrides or {}).items() if value is not None})
        data.update(changed)
        # An overridden experiment seed also reseeds the engine
        if "seed" in changed and isinstance(data.get("engine"), dict):
            data["engine"] = {**data["engine"], "seed": changed["seed"]}
        return cls.from_dict(data)

    def attack_mapping(self) -> AttackCategoryMap:
        return load_attack_mapping(
            self.attack_map_path,
            unknown_policy=self.unknown_label_policy,
            fallback_class=self.fallback_class,
            classes=self.engine.classes,
        )


# =============================================================================
# Reports
# =============================================================================


@dataclass
class RoundReport:
    """Bookkeeping of one round (0 = initial training).

    Attributes:
        accuracy_pct: Accuracy on the evaluated subset, in percent.
        cumulative_samples: Training samples ingested so far.
        failures: Evaluated size minus correct predictions.
        total_samples: Size of the whole dataset used by the run
            (denominator of fraction_of_total).
        confusion: confusion[true][predicted] counts.
        eval_set: Name of the evaluation set (offline reports only).
    """

    round: int
    accuracy_pct: float
    time_s: float
    cumulative_samples: int
    failures: int
    total_samples: int
    evaluated: int = 0
    confusion: dict[str, dict[str, int]] = field(default_factory=dict)
    eval_set: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.accuracy_pct <= 100.0:
            raise InvariantViolation(f"accuracy {self.accuracy_pct} outside [0, 100]")

    @property
    def fraction_of_total(self) -> float:
        return self.cumulative_samples / self.total_samples if self.total_samples else 0.0

    def per_class_recall(self) -> dict[str, float | None]:
        recall = {}
        for label, row in self.confusion.items():
            total = sum(row.values())
            recall[label] = row.get(label, 0) / total if total else None
        return recall

    def to_dict(self) -> dict[str, Any]:
        data = {
            "round": self.round,
            "accuracy_pct": self.accuracy_pct,
            "time_s": self.time_s,
            "cumulative_samples": self.cumulative_samples,
            "failures": self.failures,
            "fraction_of_total": self.fraction_of_total,
            "evaluated": self.evaluated,
            "confusion": self.confusion,
            "per_class_recall": self.per_class_recall(),
        }
        if self.eval_set is not None:
            data["eval_set"] = self.eval_set
        return data


def validate(
    predictions: Sequence[Prediction], truths: Sequence[ClassLabel]
) -> tuple[float, list[int]]:
    """Compare predictions with confirmed labels.

    Returns:
        (accuracy percent, indices of failed predictions in order).

    Raises:
        DataError: On empty input or a length mismatch.
    """
    if len(predictions) != len(truths):
        raise DataError(f"{len(predictions)} predictions but {len(truths)} labels")
    if not predictions:
        raise DataError("Nothing to validate")
    failed = [i for i, (p, t) in enumerate(zip(predictions, truths)) if p.label != t]
    accuracy = 100.0 * (len(truths) - len(failed)) / len(truths)
    return accuracy, failed


def confusion_matrix(
    predictions: Sequence[Prediction], truths: Sequence[ClassLabel], classes: Sequence[ClassLabel]
) -> dict[str, dict[str, int]]:
    matrix = {t: {p: 0 for p in classes} for t in classes}
    for prediction, truth in zip(predictions, truths):
        matrix.setdefault(truth, {p: 0 for p in classes})
        matrix[truth][prediction.label] = matrix[truth].get(prediction.label, 0) + 1
    return matrix


def _format_row(report: RoundReport) -> list[str]:
    row = [
        str(report.round),
        f"{report.accuracy_pct:.4f}",
        f"{report.time_s:.3f}",
        str(report.cumulative_samples),
        str(report.failures),
        f"{report.fraction_of_total:.6f}",
    ]
    if report.eval_set is not None:
        row.append(report.eval_set)
    return row


def emit_report(reports: Sequence[RoundReport], fmt: str, path: str | Path) -> Path:
    """Write reports as JSON or CSV.

    CSV columns are round, accuracy_pct, time_s, cumulative_samples, failures
    and fraction_of_total, plus eval_set for offline reports.

    Raises:
        ValueError: On an empty report list or unknown format.
        OSError: If the path is not writable.
    """
    if not reports:
        raise ValueError("No reports to emit")
    if fmt not in REPORT_FORMATS:
        raise ValueError(f"Unknown report format '{fmt}'")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"reports": [r.to_dict() for r in reports]}, f, ensure_ascii=False, indent=2)
            f.write("\n")
    else:
        header = list(REPORT_COLUMNS)
        if any(r.eval_set is not None for r in reports):
            header.append("eval_set")
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for report in reports:
                writer.writerow(_format_row(report))
    return path


def format_table(reports: Sequence[RoundReport]) -> str:
    """Plain-text table of reports for console output."""
    header = ["Round", "Accuracy [%]", "Time [s]", "# samples", "Failures", "Fraction"]
    if any(r.eval_set is not None for r in reports):
        header.append("Eval set")
    rows = [header] + [
        [
            "initial" if r.round == 0 and r.eval_set is None else str(r.round),
            f"{r.accuracy_pct:.2f}",
            f"{r.time_s:.1f}",
            str(r.cumulative_samples),
            str(r.failures),
            f"{100.0 * r.fraction_of_total:.2f}%",
        ]
        + ([r.eval_set or ""] if len(header) == 7 else [])
        for r in reports
    ]
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# =============================================================================
# Data preparation
# =============================================================================


@dataclass
class ExperimentData:
    """Parsed, subsampled and encoded data of one experiment."""

    schema: DatasetSchema
    initial_indices: list[int]
    initial_samples: list[LabeledSample]
    round_indices: list[list[int]]
    round_samples: list[list[LabeledSample]]
    rounds_records: list[RawRecord] = field(repr=False, default_factory=list)

    @property
    def total_samples(self) -> int:
        return len(self.initial_samples) + sum(len(part) for part in self.round_samples)


def _to_samples(matrix: np.ndarray, labels: Sequence[ClassLabel]) -> list[LabeledSample]:
    return [LabeledSample(x=matrix[i], y=labels[i]) for i in range(len(labels))]


def _labels(records: Sequence[RawRecord], mapping: AttackCategoryMap) -> list[ClassLabel]:
    return [map_attack_category(r.label, mapping) for r in records]


def prepare_data(config: ExperimentConfig, schema: DatasetSchema | None = None) -> ExperimentData:
    """Parse both files, subsample, split into rounds and encode.

    The schema is fitted on the initial subset unless one is given.

    Raises:
        DataError: On unreadable files or labels.
        ConfigError: If a subsample size exceeds its file.
    """
    mapping = config.attack_mapping()
    initial_records = parse_nslkdd(config.initial_path)
    rounds_records = parse_nslkdd(config.rounds_path)

    initial_labels = _labels(initial_records, mapping)
    if config.initial_size is None:
        initial_indices = list(range(len(initial_records)))
    else:
        if config.initial_size > len(initial_records):
            raise ConfigError(
                f"initial_size {config.initial_size} exceeds {len(initial_records)} records"
            )
        initial_indices = stratified_subsample(initial_labels, config.initial_size, config.seed)

    rounds_labels = _labels(rounds_records, mapping)
    if config.round_size is None:
        pool = list(range(len(rounds_records)))
    else:
        wanted = config.round_size * config.rounds
        if wanted > len(rounds_records):
            raise ConfigError(
                f"{config.rounds} rounds of {config.round_size} exceed {len(rounds_records)} records"
            )
        pool = stratified_subsample(rounds_labels, wanted, config.seed + 1)
    round_indices = split_rounds(pool, config.rounds, config.seed if config.shuffle else None)

    chosen = [initial_records[i] for i in initial_indices]
    if schema is None:
        schema = fit_schema(chosen)
    initial_matrix, labels = encode_many(chosen, schema, mapping)
    initial_samples = _to_samples(initial_matrix, labels)

    round_samples = []
    for part in round_indices:
        matrix, labels = encode_many([rounds_records[i] for i in part], schema, mapping)
        round_samples.append(_to_samples(matrix, labels))

    logger.info(
        "Initial set: %d records %s",
        len(initial_samples),
        class_counts((s.y for s in initial_samples), config.engine.classes),
    )
    logger.info("Round subsets: %s", [len(part) for part in round_indices])
    return ExperimentData(
        schema=schema,
        initial_indices=initial_indices,
        initial_samples=initial_samples,
        round_indices=round_indices,
        round_samples=round_samples,
        rounds_records=rounds_records,
    )


def _matrix(samples: Sequence[LabeledSample]) -> np.ndarray:
    return np.vstack([s.x for s in samples])


# =============================================================================
# Online experiment
# =============================================================================


@dataclass
class OnlineRun:
    """Result of run_online_experiment."""

    reports: list[RoundReport]
    engine: DetectionEngine
    ledger: TrainingLedger
    data: ExperimentData
    training_samples: list[LabeledSample]


def run_online_experiment(
    config: ExperimentConfig,
    data: ExperimentData | None = None,
    clock: Callable[[], float] | None = None,
) -> OnlineRun:
    """Initial training followed by r test-then-feed-back rounds.

    The round-0 report evaluates the freshly trained engine on round subset 1.
    Round i predicts subset i with the current engine, validates, and feeds
    only the failed samples to update. Round 1 reuses round 0's predictions
    and is charged their prediction time, so every round's time covers a
    prediction pass plus its update.

    Raises:
        DataError / ConfigError: On dataset or configuration problems.
        InvariantViolation: If the sample bookkeeping goes inconsistent.
        EngineError: Re-raised with the failing round index.
    """
    data = data or prepare_data(config)
    classes = config.engine.classes
    total = data.total_samples
    if clock is None:
        clock = time.perf_counter if config.timing else (lambda: 0.0)

    engine = DetectionEngine(config.engine, schema=data.schema)
    ledger = TrainingLedger.start(
        config.initial_path,
        config.rounds_path,
        data.initial_indices,
        data.round_indices,
        data.schema.to_dict(),
        seed=config.seed,
    )
    training_samples = list(data.initial_samples)

    def evaluate(part: list[LabeledSample]) -> tuple[list[Prediction], list[ClassLabel]]:
        predictions = engine.predict_many(_matrix(part))
        return predictions, [s.y for s in part]

    started = clock()
    engine.train_initial(data.initial_samples)
    predict_started = clock()
    predictions, truths = evaluate(data.round_samples[0])
    prediction_time = clock() - predict_started
    accuracy, failed = validate(predictions, truths)
    reports = [
        RoundReport(
            round=0,
            accuracy_pct=accuracy,
            time_s=clock() - started,
            cumulative_samples=engine.samples_ingested,
            failures=len(failed),
            total_samples=total,
            evaluated=len(truths),
            confusion=confusion_matrix(predictions, truths, classes),
        )
    ]
    logger.info("Round 0: accuracy %.2f%% on %d records", accuracy, len(truths))
    # The engine is unchanged since round 0's evaluation, so round 1 reuses it
    cached = (predictions, truths, prediction_time)

    for round_index in range(1, config.rounds + 1):
        part = data.round_samples[round_index - 1]
        started = clock()
        carried = 0.0
        try:
            if cached is not None:
                predictions, truths, carried = cached
                cached = None
            else:
                predictions, truths = evaluate(part)
            accuracy, failed = validate(predictions, truths)
            fed_back = [part[i] for i in failed]
            if any(predictions[i].label == part[i].y for i in failed):
                raise InvariantViolation(f"Round {round_index}: correctly classified sample fed back")
            engine.update(fed_back)
        except EngineError as e:
            raise EngineError(f"round {round_index}: {e}") from e
        elapsed = clock() - started + carried

        entry = ledger.record_round(round_index, [data.round_indices[round_index - 1][i] for i in failed])
        training_samples.extend(fed_back)
        if entry.cumulative_samples != reports[-1].cumulative_samples + len(failed):
            raise InvariantViolation(f"Round {round_index}: cumulative count recurrence broken")
        if engine.samples_ingested != entry.cumulative_samples:
            raise InvariantViolation(
                f"Round {round_index}: engine ingested {engine.samples_ingested}, "
                f"ledger says {entry.cumulative_samples}"
            )

        reports.append(
            RoundReport(
                round=round_index,
                accuracy_pct=accuracy,
                time_s=elapsed,
                cumulative_samples=entry.cumulative_samples,
                failures=len(failed),
                total_samples=total,
                evaluated=len(truths),
                confusion=confusion_matrix(predictions, truths, classes),
            )
        )
        logger.info(
            "Round %d: accuracy %.2f%%, %d failures fed back, %d cumulative samples",
            round_index,
            accuracy,
            len(failed),
            entry.cumulative_samples,
        )

    ledger.digest = multiset_digest((s.x, s.y) for s in training_samples)
    return OnlineRun(
        reports=reports,
        engine=engine,
        ledger=ledger,
        data=data,
        training_samples=training_samples,
    )


# =============================================================================
# Offline baseline
# =============================================================================


def run_offline_baseline(
    config: ExperimentConfig,
    training_samples: Sequence[LabeledSample],
    eval_sets: Mapping[str, Sequence[LabeledSample]],
    expected_digest: str | None = None,
    total_samples: int | None = None,
    schema: DatasetSchema | None = None,
) -> list[RoundReport]:
    """Train a fresh engine once on the whole multiset and evaluate it.

    Args:
        training_samples: Exactly what the online run trained on.
        eval_sets: Named evaluation sets.
        expected_digest: Multiset digest recorded by the online run.
        total_samples: Denominator for fraction_of_total.

    Raises:
        InvariantViolation: If the multiset digest differs from expected_digest.
    """
    digest = multiset_digest((s.x, s.y) for s in training_samples)
    if expected_digest is not None and digest != expected_digest:
        raise InvariantViolation(
            f"Training multiset digest {digest[:12]} differs from online run {expected_digest[:12]}"
        )
    clock = time.perf_counter if config.timing else (lambda: 0.0)
    dimension = len(training_samples[0].x)

    started = clock()
    engine = DetectionEngine(config.engine, schema=schema, dimension=None if schema else dimension)
    engine.train_initial(training_samples)
    train_time = clock() - started

    reports = []
    for name, samples in eval_sets.items():
        started = clock()
        predictions = engine.predict_many(_matrix(samples))
        truths = [s.y for s in samples]
        accuracy, failed = validate(predictions, truths)
        reports.append(
            RoundReport(
                round=config.rounds,
                accuracy_pct=accuracy,
                time_s=train_time + clock() - started,
                cumulative_samples=len(training_samples),
                failures=len(failed),
                total_samples=total_samples or len(training_samples),
                evaluated=len(truths),
                confusion=confusion_matrix(predictions, truths, config.engine.classes),
                eval_set=name,
            )
        )
        logger.info("Offline baseline on %s: accuracy %.2f%%", name, accuracy)
    return reports


def offline_from_ledger(config: ExperimentConfig, ledger: TrainingLedger) -> list[RoundReport]:
    """Rebuild the online run's training multiset from its ledger and run the baseline.

    Raises:
        ConfigError: If the ledger does not belong to this config.
        InvariantViolation: If the rebuilt multiset digest differs.
    """
    if len(ledger.round_indices) != config.rounds:
        raise ConfigError(
            f"Ledger has {len(ledger.round_indices)} rounds, config asks for {config.rounds}"
        )
    schema = DatasetSchema.from_dict(ledger.schema)
    config = replace(config, initial_path=ledger.initial_path, rounds_path=ledger.rounds_path)
    data = prepare_data(config, schema=schema)
    if data.initial_indices != ledger.initial_indices or data.round_indices != ledger.round_indices:
        raise ConfigError("Ledger subsets do not match this config (seed or sizes differ)")

    initial_pos = {index: i for i, index in enumerate(data.initial_indices)}
    round_pos = {}
    for r, part in enumerate(data.round_indices):
        for i, index in enumerate(part):
            round_pos[index] = (r, i)

    training = []
    for source, index in ledger.training_references():
        if source == INITIAL:
            training.append(data.initial_samples[initial_pos[index]])
        else:
            r, i = round_pos[index]
            training.append(data.round_samples[r][i])

    eval_sets = {
        "rounds_union": [s for part in data.round_samples for s in part],
        "final_round": data.round_samples[-1],
    }
    return run_offline_baseline(
        config,
        training,
        eval_sets,
        expected_digest=ledger.digest,
        total_samples=data.total_samples,
        schema=schema,
    )
