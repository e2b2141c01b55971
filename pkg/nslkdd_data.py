"""NSL-KDD record parsing and feature encoding.

Reads NSL-KDD text files, fits an encoding schema on the initial training
records (one-hot categoricals with an unknown slot, min-max scaled numerics),
maps fine-grained attack names to the coarse detection classes and splits
record lists for the incremental round protocol.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import MinMaxScaler, OneHotEncoder

logger = logging.getLogger(__name__)

# 41 attribute names in NSL-KDD column order
ATTRIBUTE_NAMES: tuple[str, ...] = (
    "duration", "protocol_type", "service", "flag", "src_bytes", "dst_bytes",
    "land", "wrong_fragment", "urgent", "hot", "num_failed_logins",
    "logged_in", "num_compromised", "root_shell", "su_attempted", "num_root",
    "num_file_creations", "num_shells", "num_access_files",
    "num_outbound_cmds", "is_host_login", "is_guest_login", "count",
    "srv_count", "serror_rate", "srv_serror_rate", "rerror_rate",
    "srv_rerror_rate", "same_srv_rate", "diff_srv_rate", "srv_diff_host_rate",
    "dst_host_count", "dst_host_srv_count", "dst_host_same_srv_rate",
    "dst_host_diff_srv_rate", "dst_host_same_src_port_rate",
    "dst_host_srv_diff_host_rate", "dst_host_serror_rate",
    "dst_host_srv_serror_rate", "dst_host_rerror_rate",
    "dst_host_srv_rerror_rate",
)
ATTRIBUTE_COUNT = len(ATTRIBUTE_NAMES)

DEFAULT_CATEGORICAL = ("protocol_type", "service", "flag")

# Coarse classes in enumeration order (ties everywhere break by this order)
DEFAULT_CLASSES: tuple[str, ...] = ("normal", "dos", "probe", "r2l", "u2r")

DEFAULT_ATTACK_MAP = Path(__file__).resolve().parent / "attack_categories.tsv"

NUMERIC = "numeric"
CATEGORICAL = "categorical"
UNKNOWN_SLOT = "<unknown>"

SCHEMA_FORMAT = "nslkdd-schema"


class DataError(ValueError):
    """Raised for unreadable, malformed or unencodable NSL-KDD data."""


# Type alias: class labels are the lowercase names from DEFAULT_CLASSES
ClassLabel = str


@dataclass(frozen=True)
class RawRecord:
    """One parsed NSL-KDD line before encoding."""

    attributes: tuple[str, ...]
    label: str
    difficulty: int | None = None
    line: int = 0

    def __post_init__(self):
        if len(self.attributes) != ATTRIBUTE_COUNT:
            raise DataError(
                f"line {self.line}: expected {ATTRIBUTE_COUNT} attributes, "
                f"got {len(self.attributes)}"
            )
        if not self.label:
            raise DataError(f"line {self.line}: empty label")


@dataclass(frozen=True)
class LabeledSample:
    """Encoded feature vector and its coarse class."""

    x: np.ndarray
    y: ClassLabel


# =============================================================================
# Parsing
# =============================================================================


def _read_fields(path: Path) -> pd.DataFrame:
    """Tokenize an NSL-KDD file into a string frame, one row per physical line.

    Blank lines are kept as all-missing rows so row i is line i + 1. Short
    lines are padded with missing cells; a line longer than the first one
    is rejected by the tokenizer with its line number.
    """
    try:
        frame = pd.read_csv(
            path,
            header=None,
            dtype=str,
            skip_blank_lines=False,
            skipinitialspace=True,
            keep_default_na=False,
            na_values=[""],
            encoding="utf-8",
        )
    except pd.errors.EmptyDataError:
        raise DataError(f"{path.name}: file contains no records") from None
    except pd.errors.ParserError as exc:
        raise DataError(f"{path.name}: {str(exc).strip()}") from None
    except UnicodeDecodeError as exc:
        raise DataError(f"{path.name}: not UTF-8 text ({exc.reason} at byte {exc.start})") from None

    width = frame.shape[1]
    if width not in (ATTRIBUTE_COUNT + 1, ATTRIBUTE_COUNT + 2):
        first = int(np.flatnonzero(frame.notna().any(axis=1).to_numpy())[0]) + 1
        raise DataError(f"{path.name} line {first}: expected 42 or 43 fields, got {width}")
    if width == ATTRIBUTE_COUNT + 1:
        frame[ATTRIBUTE_COUNT + 1] = np.nan
    return frame


def parse_nslkdd(path: str | Path) -> list[RawRecord]:
    """Parse an NSL-KDD text file.

    Args:
        path: File with 42 or 43 comma-separated fields per line
            (41 attributes, label and optional difficulty).

    Returns:
        One RawRecord per non-empty line, file order preserved.

    Raises:
        DataError: If a line has the wrong field count, the difficulty is not
            an integer, or the file has no records.
        OSError: If the file cannot be read.
    """
    path = Path(path)
    frame = _read_fields(path)

    missing = frame.isna().to_numpy()
    present = ~missing.all(axis=1)
    if not present.any():
        raise DataError(f"{path.name}: file contains no records")

    difficulty_column = frame[ATTRIBUTE_COUNT + 1]
    difficulties = pd.to_numeric(difficulty_column, errors="coerce").to_numpy(dtype=np.float64)
    fields = frame.to_numpy(dtype=object)

    records: list[RawRecord] = []
    for row in np.flatnonzero(present):
        line_no = int(row) + 1
        if missing[row, : ATTRIBUTE_COUNT + 1].any():
            count = int((~missing[row]).sum())
            raise DataError(
                f"{path.name} line {line_no}: expected 42 or 43 fields, got {count}"
            )
        difficulty = None
        if not missing[row, ATTRIBUTE_COUNT + 1]:
            value = difficulties[row]
            if not np.isfinite(value) or value != int(value):
                raise DataError(
                    f"{path.name} line {line_no}: difficulty "
                    f"'{fields[row, ATTRIBUTE_COUNT + 1]}' is not an integer"
                )
            difficulty = int(value)
        records.append(
            RawRecord(
                attributes=tuple(str(token).strip() for token in fields[row, :ATTRIBUTE_COUNT]),
                label=str(fields[row, ATTRIBUTE_COUNT]).strip().lower(),
                difficulty=difficulty,
                line=line_no,
            )
        )

    logger.info("Parsed %d records from %s", len(records), path)
    return records


# =============================================================================
# Attack category mapping
# =============================================================================


@dataclass
class AttackCategoryMap:
    """Attack-name to coarse-class lookup table.

    Attributes:
        table: Raw attack name -> class label.
        unknown_policy: "error" raises on unmapped names, "fallback" maps
            them to fallback_class.
        fallback_class: Class used under the "fallback" policy.
    """

    table: dict[str, ClassLabel]
    unknown_policy: str = "error"
    fallback_class: ClassLabel | None = None

    POLICIES = ("error", "fallback")

    def __post_init__(self):
        if self.unknown_policy not in self.POLICIES:
            raise DataError(
                f"Unknown label policy '{self.unknown_policy}'. "
                f"Supported: {', '.join(self.POLICIES)}"
            )
        if self.unknown_policy == "fallback" and not self.fallback_class:
            raise DataError("Fallback policy requires a fallback class")

    @property
    def classes(self) -> set[ClassLabel]:
        return set(self.table.values())


def load_attack_mapping(
    path: str | Path = DEFAULT_ATTACK_MAP,
    unknown_policy: str = "error",
    fallback_class: ClassLabel | None = None,
    classes: Sequence[ClassLabel] = DEFAULT_CLASSES,
) -> AttackCategoryMap:
    """Load the `attack_name<TAB>category` mapping file.

    Blank lines and lines starting with '#' are skipped. Every category
    must be one of `classes`.

    Raises:
        DataError: On malformed lines, conflicting duplicates or a category
            outside `classes`.
    """
    path = Path(path)
    allowed = {c.lower() for c in classes}
    table: dict[str, ClassLabel] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                raise DataError(
                    f"{path.name} line {line_no}: expected 'attack<TAB>category'"
                )
            name, category = parts[0].strip().lower(), parts[1].strip().lower()
            if category not in allowed:
                raise DataError(
                    f"{path.name} line {line_no}: unknown class '{category}' for "
                    f"'{name}' (classes: {', '.join(classes)})"
                )
            if table.get(name, category) != category:
                raise DataError(
                    f"{path.name} line {line_no}: '{name}' mapped to both "
                    f"'{table[name]}' and '{category}'"
                )
            table[name] = category

    if "normal" in allowed:
        table.setdefault("normal", "normal")
    if fallback_class is not None and fallback_class.lower() not in allowed:
        raise DataError(f"Fallback class '{fallback_class}' is not one of {', '.join(classes)}")
    return AttackCategoryMap(
        table=table, unknown_policy=unknown_policy, fallback_class=fallback_class
    )


def map_attack_category(label: str, mapping: AttackCategoryMap) -> ClassLabel:
    """Map a raw NSL-KDD label to its coarse class.

    Raises:
        DataError: If the label is unmapped and the policy is "error".
    """
    key = label.strip().lower()
    category = mapping.table.get(key)
    if category is not None:
        return category
    if mapping.unknown_policy == "fallback":
        return mapping.fallback_class
    raise DataError(f"Unmapped attack label '{label}'")


# =============================================================================
# Schema
# =============================================================================


@dataclass
class DatasetSchema:
    """Encoding schema fitted on the initial training records.

    Attributes:
        kinds: Per-attribute kind, NUMERIC or CATEGORICAL, in column order.
        vocabularies: Sorted observed values per categorical attribute.
        minimums / maximums: Observed range per numeric attribute.

    The fitted ranges and vocabularies drive a clipping MinMaxScaler and a
    OneHotEncoder whose last category per block is the unknown slot.
    """

    kinds: list[str]
    vocabularies: dict[str, list[str]] = field(default_factory=dict)
    minimums: dict[str, float] = field(default_factory=dict)
    maximums: dict[str, float] = field(default_factory=dict)
    attributes: tuple[str, ...] = ATTRIBUTE_NAMES

    def __post_init__(self):
        if len(self.kinds) != len(self.attributes):
            raise DataError("Schema kinds do not cover every attribute")
        for name, vocab in self.vocabularies.items():
            if len(set(vocab)) != len(vocab):
                raise DataError(f"Duplicate category in vocabulary of '{name}'")
            if UNKNOWN_SLOT in vocab:
                raise DataError(f"Vocabulary of '{name}' contains the reserved '{UNKNOWN_SLOT}'")
        for name, low in self.minimums.items():
            if low > self.maximums[name]:
                raise DataError(f"Attribute '{name}': min {low} > max {self.maximums[name]}")

        self._scaler = None
        numeric = self.numeric_attributes
        if numeric:
            low = np.array([self.minimums[name] for name in numeric], dtype=np.float64)
            high = np.array([self.maximums[name] for name in numeric], dtype=np.float64)
            self._scaler = MinMaxScaler(clip=True).fit(np.vstack([low, high]))
            self._constant = high == low

        self._encoder = None
        categorical = self.categorical_attributes
        if categorical:
            self._encoder = OneHotEncoder(
                categories=[[*self.vocabularies[name], UNKNOWN_SLOT] for name in categorical],
                sparse_output=False,
                dtype=np.float64,
            ).fit(np.full((1, len(categorical)), UNKNOWN_SLOT, dtype=object))

    @property
    def numeric_attributes(self) -> list[str]:
        return [name for name, kind in zip(self.attributes, self.kinds) if kind == NUMERIC]

    @property
    def categorical_attributes(self) -> list[str]:
        return [name for name, kind in zip(self.attributes, self.kinds) if kind == CATEGORICAL]

    @property
    def dimension(self) -> int:
        """Encoded dimension: numerics plus one-hot blocks with unknown slots."""
        total = 0
        for name, kind in zip(self.attributes, self.kinds):
            total += 1 if kind == NUMERIC else len(self.vocabularies[name]) + 1
        return total

    def block_slices(self) -> list[tuple[str, str, slice]]:
        """Return (attribute, kind, slice) for every encoded block in order."""
        blocks = []
        offset = 0
        for name, kind in zip(self.attributes, self.kinds):
            width = 1 if kind == NUMERIC else len(self.vocabularies[name]) + 1
            blocks.append((name, kind, slice(offset, offset + width)))
            offset += width
        return blocks

    def feature_names(self) -> list[str]:
        names = []
        for name, kind in zip(self.attributes, self.kinds):
            if kind == NUMERIC:
                names.append(name)
            else:
                names.extend(f"{name}={value}" for value in self.vocabularies[name])
                names.append(f"{name}={UNKNOWN_SLOT}")
        return names

    def scale_numeric(self, values: np.ndarray) -> np.ndarray:
        """Min-max scale numeric columns into [0, 1]; constant columns become 0."""
        scaled = self._scaler.transform(values)
        scaled[:, self._constant] = 0.0
        return scaled

    def one_hot(self, tokens: pd.DataFrame) -> np.ndarray:
        """One-hot encode categorical columns, unseen values in the unknown slot."""
        known = tokens.copy()
        for name in self.categorical_attributes:
            column = known[name]
            known[name] = column.where(column.isin(self.vocabularies[name]), UNKNOWN_SLOT)
        return self._encoder.transform(known[self.categorical_attributes].to_numpy(dtype=object))

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": SCHEMA_FORMAT,
            "attributes": list(self.attributes),
            "kinds": list(self.kinds),
            "vocabularies": {k: list(v) for k, v in self.vocabularies.items()},
            "minimums": dict(self.minimums),
            "maximums": dict(self.maximums),
            "dimension": self.dimension,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DatasetSchema:
        if data.get("format") != SCHEMA_FORMAT:
            raise DataError(f"Not a dataset schema: format={data.get('format')!r}")
        schema = cls(
            kinds=list(data["kinds"]),
            vocabularies={k: list(v) for k, v in data["vocabularies"].items()},
            minimums={k: float(v) for k, v in data["minimums"].items()},
            maximums={k: float(v) for k, v in data["maximums"].items()},
            attributes=tuple(data["attributes"]),
        )
        if schema.dimension != data["dimension"]:
            raise DataError(
                f"Schema dimension mismatch: stored {data['dimension']}, "
                f"computed {schema.dimension}"
            )
        return schema


def _records_frame(records: Sequence[RawRecord], attributes: Sequence[str]) -> pd.DataFrame:
    return pd.DataFrame([r.attributes for r in records], columns=list(attributes), dtype=object)


def _numeric_values(frame: pd.DataFrame, names: Sequence[str], lines: Sequence[int]) -> np.ndarray:
    """Convert numeric columns to float64, naming the first bad token's line."""
    values = frame[list(names)].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    bad = ~np.isfinite(values)
    if bad.any():
        row, column = np.argwhere(bad)[0]
        name = names[column]
        raise DataError(
            f"line {lines[row]}: attribute '{name}' has non-numeric or non-finite "
            f"value '{frame[name].iat[row]}'"
        )
    return values


def fit_schema(
    records: Sequence[RawRecord],
    categorical_attribute_names: Iterable[str] = DEFAULT_CATEGORICAL,
) -> DatasetSchema:
    """Fit vocabularies and numeric ranges on training records.

    Raises:
        DataError: On an empty record list or a non-numeric token in a
            numeric attribute.
    """
    if not records:
        raise DataError("Cannot fit a schema on an empty record list")

    categorical = set(categorical_attribute_names)
    unknown = categorical - set(ATTRIBUTE_NAMES)
    if unknown:
        raise DataError(f"Unknown categorical attributes: {sorted(unknown)}")

    kinds = [CATEGORICAL if name in categorical else NUMERIC for name in ATTRIBUTE_NAMES]
    numeric_names = [n for n, kind in zip(ATTRIBUTE_NAMES, kinds) if kind == NUMERIC]
    categorical_names = [n for n, kind in zip(ATTRIBUTE_NAMES, kinds) if kind == CATEGORICAL]
    frame = _records_frame(records, ATTRIBUTE_NAMES)

    minimums: dict[str, float] = {}
    maximums: dict[str, float] = {}
    if numeric_names:
        values = _numeric_values(frame, numeric_names, [r.line for r in records])
        scaler = MinMaxScaler().fit(values)
        minimums = dict(zip(numeric_names, scaler.data_min_.tolist()))
        maximums = dict(zip(numeric_names, scaler.data_max_.tolist()))

    vocabularies: dict[str, list[str]] = {}
    if categorical_names:
        encoder = OneHotEncoder().fit(frame[categorical_names].to_numpy(dtype=object))
        vocabularies = {
            name: [str(value) for value in categories]
            for name, categories in zip(categorical_names, encoder.categories_)
        }

    schema = DatasetSchema(
        kinds=kinds,
        vocabularies=vocabularies,
        minimums=minimums,
        maximums=maximums,
    )
    logger.info(
        "Fitted schema on %d records: dimension %d (%s)",
        len(records),
        schema.dimension,
        ", ".join(f"{k}={len(v)}" for k, v in schema.vocabularies.items()),
    )
    return schema


def save_schema(schema: DatasetSchema, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(schema.to_dict(), f, ensure_ascii=False, indent=2)


def load_schema(path: str | Path) -> DatasetSchema:
    with open(path, "r", encoding="utf-8") as f:
        return DatasetSchema.from_dict(json.load(f))


# =============================================================================
# Encoding
# =============================================================================


def encode_records(records: Sequence[RawRecord], schema: DatasetSchema) -> np.ndarray:
    """Encode the 41 attributes of each record into a (len(records), dimension) matrix.

    Numerics are min-max scaled with the schema ranges and clipped to [0, 1];
    constant columns encode to 0. Categories unseen while fitting go to the
    block's unknown slot.

    Raises:
        DataError: On a non-numeric token in a numeric attribute.
    """
    matrix = np.zeros((len(records), schema.dimension), dtype=np.float64)
    if not records:
        return matrix

    frame = _records_frame(records, schema.attributes)
    numeric = schema.numeric_attributes
    scaled = (
        schema.scale_numeric(_numeric_values(frame, numeric, [r.line for r in records]))
        if numeric
        else None
    )
    one_hot = schema.one_hot(frame) if schema.categorical_attributes else None

    numeric_column = one_hot_column = 0
    for _, kind, block in schema.block_slices():
        width = block.stop - block.start
        if kind == NUMERIC:
            matrix[:, block] = scaled[:, numeric_column:numeric_column + 1]
            numeric_column += 1
        else:
            matrix[:, block] = one_hot[:, one_hot_column:one_hot_column + width]
            one_hot_column += width
    return matrix


def encode_features(record: RawRecord, schema: DatasetSchema) -> np.ndarray:
    """Encode a single record into a schema.dimension vector."""
    return encode_records([record], schema)[0]


def encode(
    record: RawRecord, schema: DatasetSchema, mapping: AttackCategoryMap
) -> LabeledSample:
    """Encode a record and map its label to a coarse class.

    Raises:
        DataError: On non-numeric tokens or unmapped labels.
    """
    return LabeledSample(
        x=encode_features(record, schema),
        y=map_attack_category(record.label, mapping),
    )


def encode_many(
    records: Sequence[RawRecord], schema: DatasetSchema, mapping: AttackCategoryMap
) -> tuple[np.ndarray, list[ClassLabel]]:
    """Encode records into a (len(records), dimension) matrix and labels."""
    labels = [map_attack_category(record.label, mapping) for record in records]
    return encode_records(records, schema), labels


# =============================================================================
# Splitting and sampling
# =============================================================================


def split_rounds(records: Sequence, r: int, seed: int | None = None) -> list[list]:
    """Split records into r disjoint parts whose sizes differ by at most one.

    Without a seed the split is contiguous in input order; with a seed the
    records are shuffled deterministically first.

    Raises:
        DataError: If r < 1, records is empty or r exceeds the record count.
    """
    if r < 1:
        raise DataError(f"Round count must be >= 1, got {r}")
    if not records:
        raise DataError("Cannot split an empty record list")
    if r > len(records):
        raise DataError(f"Round count {r} exceeds record count {len(records)}")

    items = list(records)
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(items))
        items = [items[i] for i in order]

    base, extra = divmod(len(items), r)
    parts = []
    start = 0
    for i in range(r):
        size = base + (1 if i < extra else 0)
        parts.append(items[start:start + size])
        start += size
    return parts


def stratified_subsample(
    labels: Sequence[ClassLabel], size: int, seed: int | None = None
) -> list[int]:
    """Pick `size` indices preserving class proportions.

    Quotas come from scikit-learn's stratified split. A class whose quota
    rounds down to zero takes one slot from the class that most exceeds its
    exact share, so every class present in labels keeps at least one index.
    Indices are returned sorted (file order).

    Raises:
        DataError: If size exceeds the record count, or the split is
            impossible (a class with a single record, fewer slots than
            classes).
    """
    total = len(labels)
    if size > total:
        raise DataError(f"Subsample size {size} exceeds available records {total}")
    if size == total:
        return list(range(total))

    try:
        picked, left = train_test_split(
            np.arange(total), train_size=size, stratify=list(labels), random_state=seed
        )
    except ValueError as exc:
        raise DataError(f"Cannot draw a stratified subsample of {size}: {exc}") from None

    picked = sorted(int(i) for i in picked)
    left = sorted(int(i) for i in left)
    counts = Counter(labels[i] for i in picked)
    shares = {c: size * n / total for c, n in Counter(labels).items()}
    for label in sorted(set(shares) - set(counts)):
        donor = max(
            (c for c in counts if counts[c] > 1),
            key=lambda c: (counts[c] - shares[c], counts[c], c),
        )
        picked.remove(next(i for i in picked if labels[i] == donor))
        picked.append(next(i for i in left if labels[i] == label))
        counts[donor] -= 1
        counts[label] = 1
    return sorted(picked)


def class_counts(
    labels: Iterable[ClassLabel], classes: Sequence[ClassLabel] = DEFAULT_CLASSES
) -> dict[ClassLabel, int]:
    """Count labels, listing `classes` first in their order."""
    counts = Counter(labels)
    ordered = {c: counts.get(c, 0) for c in classes}
    for c in sorted(counts):
        ordered.setdefault(c, counts[c])
    return ordered


# =============================================================================
# Digests
# =============================================================================


def sample_digest(x: np.ndarray, y: ClassLabel) -> str:
    """SHA-256 of one encoded sample (float64 bytes plus label)."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(x, dtype=np.float64).tobytes())
    h.update(b"\x00")
    h.update(y.encode("utf-8"))
    return h.hexdigest()


def multiset_digest(samples: Iterable[tuple[np.ndarray, ClassLabel]]) -> str:
    """Order-independent digest of a sample multiset."""
    h = hashlib.sha256()
    for digest in sorted(sample_digest(x, y) for x, y in samples):
        h.update(digest.encode("ascii"))
    return h.hexdigest()
