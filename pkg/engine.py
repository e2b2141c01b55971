"""Detection engine: per-class SOINN pairs feeding one-vs-all and pairwise SVMs.

Every class owns a positive network (low win cap, fine compression) and a
negative network (high win cap, coarse compression). A class's binary SVM is
trained on its positive nodes against the negative nodes of every other
class; its decision value is the class score. The m best-scoring classes
then go to a max-wins vote among pairwise SVMs trained on positive nodes.

The engine alternates two phases: a live phase where predict runs lock-free,
and an updating phase (train_initial, update, refit_svms) that holds the
phase lock.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from nslkdd_data import DEFAULT_CLASSES, ClassLabel, DatasetSchema, LabeledSample
from soinn import SoinnNetwork, SoinnParams
from svm import BinarySvmModel, SvmParams, decision_values, smo_train, tally_votes

logger = logging.getLogger(__name__)

SNAPSHOT_FORMAT = "soinn-nids-engine"
SNAPSHOT_VERSION = 1


class ConfigError(ValueError):
    """Raised for invalid engine or experiment configuration."""


class EngineError(RuntimeError):
    """Raised when the engine cannot train, update or predict."""


class SnapshotVersionError(EngineError):
    """Raised when a snapshot was written by an incompatible version."""

    def __init__(self, found: Any, expected: int):
        super().__init__(f"Snapshot version {found} is not supported (expected {expected})")
        self.found = found
        self.expected = expected


class SnapshotCorruptedError(EngineError):
    """Raised when a snapshot is truncated, unparsable or fails its checksum."""


# =============================================================================
# Configuration
# =============================================================================


@dataclass(frozen=True)
class EngineConfig:
    """Engine parameters.

    Attributes:
        classes: Class labels in enumeration (tie-break) order.
        n_positive: Win cap of every positive network.
        n_negative: Win cap of every negative network.
        m: Number of top-scoring classes sent to the pairwise vote.
        soinn: age_max / lambda / neighbour-rate settings shared by all
            networks (its n is replaced per polarity).
        svm: Parameters of every binary and pairwise SVM.
        refit_workers: Threads used to train SVMs during a refit.
        seed: Base seed; SVM i trains with seed + i.
    """

    classes: tuple[ClassLabel, ...] = DEFAULT_CLASSES
    n_positive: int = 2
    n_negative: int = 100
    m: int = 3
    soinn: SoinnParams = field(default_factory=SoinnParams)
    svm: SvmParams = field(default_factory=SvmParams)
    refit_workers: int = 1
    seed: int = 0

    def __post_init__(self):
        k = len(self.classes)
        if len(set(self.classes)) != k:
            raise ConfigError(f"Duplicate class labels in {list(self.classes)}")
        if k < 2:
            raise ConfigError(f"At least 2 classes are required, got {k}")
        if self.n_positive >= self.n_negative:
            raise ConfigError(
                f"n_positive ({self.n_positive}) must be lower than n_negative ({self.n_negative})"
            )
        if self.n_positive < 0:
            raise ConfigError(f"n_positive must be >= 0, got {self.n_positive}")
        if not 2 <= self.m <= k:
            raise ConfigError(f"m must be between 2 and {k}, got {self.m}")
        if self.refit_workers < 1:
            raise ConfigError(f"refit_workers must be >= 1, got {self.refit_workers}")

    def positive_params(self) -> SoinnParams:
        return SoinnParams(
            n=self.n_positive,
            age_max=self.soinn.age_max,
            lambda_=self.soinn.lambda_,
            neighbor_rate_divisor=self.soinn.neighbor_rate_divisor,
        )

    def negative_params(self) -> SoinnParams:
        return SoinnParams(
            n=self.n_negative,
            age_max=self.soinn.age_max,
            lambda_=self.soinn.lambda_,
            neighbor_rate_divisor=self.soinn.neighbor_rate_divisor,
        )

    def to_dict(self) -> dict[str, Any]:
        soinn = self.soinn.to_dict()
        soinn.pop("n")
        return {
            "classes": list(self.classes),
            "n_positive": self.n_positive,
            "n_negative": self.n_negative,
            "m": self.m,
            "soinn": soinn,
            "svm": self.svm.to_dict(),
            "refit_workers": self.refit_workers,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> EngineConfig:
        """Build a config from a (possibly partial) mapping.

        Raises:
            ConfigError: On unknown keys or invalid values.
        """
        known = {"classes", "n_positive", "n_negative", "m", "soinn", "svm", "refit_workers", "seed"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown engine config keys: {sorted(unknown)}")
        defaults = cls()
        soinn = dict(data.get("soinn", {}))
        try:
            soinn_params = SoinnParams(
                n=0,
                age_max=int(soinn.pop("age_max", defaults.soinn.age_max)),
                lambda_=int(soinn.pop("lambda", defaults.soinn.lambda_)),
                neighbor_rate_divisor=float(
                    soinn.pop("neighbor_rate_divisor", defaults.soinn.neighbor_rate_divisor)
                ),
            )
            if soinn:
                raise ConfigError(f"Unknown soinn config keys: {sorted(soinn)}")
            svm_data = dict(data.get("svm", {}))
            unknown_svm = set(svm_data) - set(SvmParams().to_dict())
            if unknown_svm:
                raise ConfigError(f"Unknown svm config keys: {sorted(unknown_svm)}")
            return cls(
                classes=tuple(str(c).lower() for c in data.get("classes", defaults.classes)),
                n_positive=int(data.get("n_positive", defaults.n_positive)),
                n_negative=int(data.get("n_negative", defaults.n_negative)),
                m=int(data.get("m", defaults.m)),
                soinn=soinn_params,
                svm=SvmParams.from_dict(svm_data),
                refit_workers=int(data.get("refit_workers", defaults.refit_workers)),
                seed=int(data.get("seed", defaults.seed)),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid engine config: {e}") from e


# =============================================================================
# Engine state
# =============================================================================


@dataclass
class ClassModel:
    """Positive/negative network pair and binary SVM of one class."""

    label: ClassLabel
    positive: SoinnNetwork
    negative: SoinnNetwork
    binary_svm: BinarySvmModel | None = None
    samples_seen: int = 0


@dataclass(frozen=True)
class Prediction:
    """Outcome of one query.

    Attributes:
        label: Final class.
        scores: Binary SVM decision value per class; -inf for classes
            without a trained binary SVM.
        top_m: Candidate classes by descending score.
        votes: Pairwise votes per candidate.
    """

    label: ClassLabel
    scores: dict[ClassLabel, float]
    top_m: tuple[ClassLabel, ...]
    votes: dict[ClassLabel, int]


class DetectionEngine:
    """The composite detector.

    Use train_initial once, then alternate predict (live phase) and update
    with failed predictions (updating phase).
    """

    def __init__(
        self,
        config: EngineConfig | None = None,
        schema: DatasetSchema | None = None,
        dimension: int | None = None,
    ):
        """Initialize an engine with empty networks and no SVMs.

        Args:
            config: Engine parameters.
            schema: Encoding schema; its dimension fixes d.
            dimension: Input dimension when no schema is given.

        Raises:
            ConfigError: If neither schema nor dimension is given, or they disagree.
        """
        self.config = config or EngineConfig()
        if schema is not None:
            if dimension is not None and dimension != schema.dimension:
                raise ConfigError(
                    f"dimension {dimension} disagrees with schema dimension {schema.dimension}"
                )
            dimension = schema.dimension
        if dimension is None or dimension < 1:
            raise ConfigError("Engine needs a schema or a positive dimension")

        self.schema = schema
        self.dimension = dimension
        self.samples_ingested = 0
        self.class_models: dict[ClassLabel, ClassModel] = {
            label: ClassModel(
                label=label,
                positive=SoinnNetwork(dimension, self.config.positive_params()),
                negative=SoinnNetwork(dimension, self.config.negative_params()),
            )
            for label in self.config.classes
        }
        self.pairwise_svms: dict[tuple[ClassLabel, ClassLabel], BinarySvmModel] = {}

        # Held for the whole updating phase
        self._lock = threading.Lock()

    @property
    def classes(self) -> tuple[ClassLabel, ...]:
        return self.config.classes

    @property
    def m(self) -> int:
        return self.config.m

    @property
    def trained_classes(self) -> list[ClassLabel]:
        return [c for c in self.classes if self.class_models[c].binary_svm is not None]

    @property
    def is_fitted(self) -> bool:
        return len(self.trained_classes) >= 2

    # =========================================================================
    # Updating phase
    # =========================================================================

    def _ingest(self, samples: Sequence[LabeledSample]) -> None:
        for i, sample in enumerate(samples):
            model = self.class_models.get(sample.y)
            if model is None:
                raise EngineError(f"Sample {i} has unknown class '{sample.y}'")
            x = np.asarray(sample.x, dtype=np.float64)
            if x.shape != (self.dimension,):
                raise EngineError(
                    f"Sample {i} has dimension {x.shape}, engine expects {self.dimension}"
                )

        for sample in samples:
            model = self.class_models[sample.y]
            model.positive.process_input(sample.x)
            model.negative.process_input(sample.x)
            model.samples_seen += 1
        self.samples_ingested += len(samples)

    def train_initial(self, samples: Sequence[LabeledSample]) -> None:
        """Feed samples into both networks of their class, then refit all SVMs.

        Raises:
            EngineError: If samples cover fewer than 2 classes, carry an
                unknown class or have the wrong dimension.
        """
        present = {s.y for s in samples}
        if len(present & set(self.classes)) < 2:
            raise EngineError(
                f"Initial training needs at least 2 classes, got {sorted(present)}"
            )
        with self._lock:
            started = time.perf_counter()
            self._ingest(samples)
            logger.info(
                "Ingested %d initial samples in %.2fs", len(samples), time.perf_counter() - started
            )
            self._refit()

    def update(self, failed: Sequence[LabeledSample]) -> None:
        """Feed failed predictions (with true labels) back and refit.

        An empty list leaves the engine untouched.
        """
        if not failed:
            return
        with self._lock:
            self._ingest(failed)
            logger.info("Ingested %d failed samples", len(failed))
            self._refit()

    def refit_svms(self) -> None:
        """Retrain every binary and pairwise SVM from the current node sets."""
        with self._lock:
            self._refit()

    def _refit(self) -> None:
        started = time.perf_counter()
        with_data = [c for c in self.classes if self.class_models[c].samples_seen > 0]
        for c in with_data:
            if self.class_models[c].positive.node_count == 0:
                raise EngineError(f"Class '{c}' has training data but no positive nodes")
        if len(with_data) < 2:
            raise EngineError(f"Refit needs at least 2 classes with data, got {with_data}")

        positives = {c: self.class_models[c].positive.export_matrix() for c in with_data}
        negatives = {c: self.class_models[c].negative.export_matrix() for c in with_data}

        tasks: list[tuple[Any, np.ndarray, np.ndarray]] = []
        for c in with_data:
            rest = [negatives[j] for j in with_data if j != c]
            tasks.append((c, positives[c], np.vstack(rest)))
        for i, a in enumerate(with_data):
            for b in with_data[i + 1:]:
                tasks.append(((a, b), positives[a], positives[b]))

        def train(index: int) -> BinarySvmModel:
            _, pos, neg = tasks[index]
            X = np.vstack([pos, neg])
            y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
            return smo_train(X, y, self.config.svm, seed=self.config.seed + index)

        if self.config.refit_workers > 1:
            with ThreadPoolExecutor(max_workers=self.config.refit_workers) as pool:
                models = list(pool.map(train, range(len(tasks))))
        else:
            models = [train(i) for i in range(len(tasks))]

        for model in self.class_models.values():
            model.binary_svm = None
        self.pairwise_svms = {}
        for (key, _, _), model in zip(tasks, models):
            if isinstance(key, tuple):
                self.pairwise_svms[key] = model
            else:
                self.class_models[key].binary_svm = model

        logger.info(
            "Refit %d binary and %d pairwise SVMs in %.2fs",
            len(with_data),
            len(self.pairwise_svms),
            time.perf_counter() - started,
        )

    # =========================================================================
    # Live phase
    # =========================================================================

    def predict(self, x) -> Prediction:
        """Classify one encoded feature vector.

        Raises:
            EngineError: If the engine is unfitted or x has the wrong dimension.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dimension,):
            raise EngineError(f"Expected dimension {self.dimension}, got shape {x.shape}")
        return self.predict_many(x[np.newaxis, :])[0]

    def predict_many(self, X) -> list[Prediction]:
        """Classify every row of X; row i matches predict(X[i])."""
        if not self.is_fitted:
            raise EngineError("Engine has no fitted SVMs; run train_initial first")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dimension:
            raise EngineError(f"Expected dimension {self.dimension}, got {X.shape[1]}")

        trained = self.trained_classes
        rank = {c: i for i, c in enumerate(self.classes)}
        score_matrix = np.column_stack(
            [decision_values(self.class_models[c].binary_svm, X) for c in trained]
        )
        pair_matrix = {key: decision_values(model, X) for key, model in self.pairwise_svms.items()}
        top = min(self.m, len(trained))

        predictions = []
        for row in range(X.shape[0]):
            scores = {c: float("-inf") for c in self.classes}
            for col, c in enumerate(trained):
                scores[c] = float(score_matrix[row, col])
            top_m = tuple(sorted(trained, key=lambda c: (-scores[c], rank[c]))[:top])
            decisions = {key: float(values[row]) for key, values in pair_matrix.items()}
            label, votes = tally_votes(top_m, decisions, scores, self.classes)
            predictions.append(Prediction(label=label, scores=scores, top_m=top_m, votes=votes))
        return predictions

    # =========================================================================
    # Inspection and persistence
    # =========================================================================

    def summary(self) -> dict[str, Any]:
        """Node counts, SVM sizes and parameters."""
        return {
            "dimension": self.dimension,
            "samples_ingested": self.samples_ingested,
            "config": self.config.to_dict(),
            "classes": {
                c: {
                    "samples_seen": model.samples_seen,
                    "positive_nodes": model.positive.node_count,
                    "positive_edges": model.positive.edge_count,
                    "negative_nodes": model.negative.node_count,
                    "negative_edges": model.negative.edge_count,
                    "binary_support_vectors": (
                        model.binary_svm.support_count if model.binary_svm else None
                    ),
                }
                for c, model in self.class_models.items()
            },
            "pairwise_support_vectors": {
                f"{a}|{b}": model.support_count for (a, b), model in self.pairwise_svms.items()
            },
        }

    def snapshot_dict(self) -> dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "schema": self.schema.to_dict() if self.schema else None,
            "dimension": self.dimension,
            "samples_ingested": self.samples_ingested,
            "classes": [
                {
                    "label": c,
                    "samples_seen": model.samples_seen,
                    "positive": model.positive.to_dict(),
                    "negative": model.negative.to_dict(),
                    "binary_svm": model.binary_svm.to_dict() if model.binary_svm else None,
                }
                for c, model in self.class_models.items()
            ],
            "pairwise": [
                {"a": a, "b": b, "model": model.to_dict()}
                for (a, b), model in self.pairwise_svms.items()
            ],
        }

    @classmethod
    def from_snapshot_dict(cls, payload: Mapping[str, Any]) -> DetectionEngine:
        schema = DatasetSchema.from_dict(payload["schema"]) if payload["schema"] else None
        engine = cls(
            EngineConfig.from_dict(payload["config"]),
            schema=schema,
            dimension=int(payload["dimension"]),
        )
        engine.samples_ingested = int(payload["samples_ingested"])
        for entry in payload["classes"]:
            model = engine.class_models.get(entry["label"])
            if model is None:
                raise SnapshotCorruptedError(f"Snapshot class '{entry['label']}' not in config")
            model.samples_seen = int(entry["samples_seen"])
            model.positive = SoinnNetwork.from_dict(entry["positive"])
            model.negative = SoinnNetwork.from_dict(entry["negative"])
            if entry["binary_svm"] is not None:
                model.binary_svm = BinarySvmModel.from_dict(entry["binary_svm"])
        engine.pairwise_svms = {
            (entry["a"], entry["b"]): BinarySvmModel.from_dict(entry["model"])
            for entry in payload["pairwise"]
        }
        return engine

    @staticmethod
    def _checksum(payload: Mapping[str, Any]) -> str:
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        """Write a versioned, checksummed JSON snapshot."""
        payload = self.snapshot_dict()
        document = {
            "format": SNAPSHOT_FORMAT,
            "version": SNAPSHOT_VERSION,
            "checksum": self._checksum(payload),
            "payload": payload,
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(document, f, ensure_ascii=False, indent=2)
        logger.info("Saved engine snapshot to %s", path)

    @classmethod
    def load(cls, path: str | Path) -> DetectionEngine:
        """Read a snapshot written by save.

        Raises:
            SnapshotVersionError: If the version tag differs.
            SnapshotCorruptedError: If the file is unparsable or fails its checksum.
            OSError: If the file cannot be read.
        """
        try:
            with open(path, "r", encoding="utf-8") as f:
                document = json.loads(f.read())
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise SnapshotCorruptedError(f"{path}: snapshot is not valid JSON ({e})") from e

        if not isinstance(document, dict) or document.get("format") != SNAPSHOT_FORMAT:
            raise SnapshotCorruptedError(f"{path}: not an engine snapshot")
        if document.get("version") != SNAPSHOT_VERSION:
            raise SnapshotVersionError(document.get("version"), SNAPSHOT_VERSION)
        payload = document.get("payload")
        if not isinstance(payload, dict) or cls._checksum(payload) != document.get("checksum"):
            raise SnapshotCorruptedError(f"{path}: checksum mismatch")
        try:
            return cls.from_snapshot_dict(payload)
        except (KeyError, TypeError, ValueError) as e:
            raise SnapshotCorruptedError(f"{path}: malformed payload ({e})") from e
