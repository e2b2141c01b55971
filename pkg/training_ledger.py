"""Training Ledger - record of everything an online run fed to the engine.

The validation step saves its failed predictions so the updating phase (and
a later offline baseline) can replay exactly the same training multiset.
A ledger stores the dataset paths, the fitted schema, which records formed
the initial set and each round subset, which records failed and were fed
back per round, and the multiset digest of all training samples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from nslkdd_data import DataError

LEDGER_FORMAT = "training-ledger"
LEDGER_VERSION = 1

INITIAL = "initial"
ROUNDS = "rounds"


@dataclass
class RoundEntry:
    """Failures fed back in one round."""

    round: int
    failed_indices: list[int]
    cumulative_samples: int


@dataclass
class TrainingLedger:
    """Manages the persisted training record of one online run.

    Indices refer to positions in the parsed initial / rounds files.
    """

    initial_path: str
    rounds_path: str
    initial_indices: list[int]
    round_indices: list[list[int]]
    schema: dict[str, Any]
    seed: int | None = None
    rounds: list[RoundEntry] = field(default_factory=list)
    digest: str = ""
    created_at: str = ""
    updated_at: str = ""

    @classmethod
    def start(
        cls,
        initial_path: str | Path,
        rounds_path: str | Path,
        initial_indices: list[int],
        round_indices: list[list[int]],
        schema: dict[str, Any],
        seed: int | None = None,
    ) -> TrainingLedger:
        """Create a ledger for a new run.

        Args:
            initial_path: Dataset file of the initial training set.
            rounds_path: Dataset file the round subsets were drawn from.
            initial_indices: Records of initial_path used for initial training.
            round_indices: Records of rounds_path in each round subset.
            schema: Fitted schema as produced by DatasetSchema.to_dict.
            seed: Experiment seed.
        """
        now = datetime.now(timezone.utc).isoformat()
        return cls(
            initial_path=str(initial_path),
            rounds_path=str(rounds_path),
            initial_indices=list(initial_indices),
            round_indices=[list(part) for part in round_indices],
            schema=schema,
            seed=seed,
            created_at=now,
            updated_at=now,
        )

    @property
    def cumulative_samples(self) -> int:
        if self.rounds:
            return self.rounds[-1].cumulative_samples
        return len(self.initial_indices)

    def record_round(self, round_index: int, failed_indices: list[int]) -> RoundEntry:
        """Append the failures fed back in a round.

        Raises:
            DataError: If rounds are recorded out of order or a failed index is
                not part of that round's subset.
        """
        expected = len(self.rounds) + 1
        if round_index != expected:
            raise DataError(f"Round {round_index} recorded out of order (expected {expected})")
        subset = set(self.round_indices[round_index - 1])
        stray = [i for i in failed_indices if i not in subset]
        if stray:
            raise DataError(f"Round {round_index}: failed indices {stray[:5]} are not in its subset")

        entry = RoundEntry(
            round=round_index,
            failed_indices=list(failed_indices),
            cumulative_samples=self.cumulative_samples + len(failed_indices),
        )
        self.rounds.append(entry)
        self.updated_at = datetime.now(timezone.utc).isoformat()
        return entry

    def training_references(self) -> list[tuple[str, int]]:
        """(source, index) of every training sample, in feeding order."""
        refs = [(INITIAL, i) for i in self.initial_indices]
        for entry in self.rounds:
            refs.extend((ROUNDS, i) for i in entry.failed_indices)
        return refs

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": LEDGER_FORMAT,
            "version": LEDGER_VERSION,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "initial_path": self.initial_path,
            "rounds_path": self.rounds_path,
            "seed": self.seed,
            "digest": self.digest,
            "schema": self.schema,
            "initial_indices": self.initial_indices,
            "round_indices": self.round_indices,
            "rounds": [
                {
                    "round": e.round,
                    "cumulative_samples": e.cumulative_samples,
                    "failed_indices": e.failed_indices,
                }
                for e in self.rounds
            ],
        }

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2)

    @classmethod
    def load(cls, path: str | Path) -> TrainingLedger:
        """Load a ledger written by save.

        Raises:
            DataError: If the file is not a ledger or has another version.
        """
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = json.load(f)
            except (json.JSONDecodeError, UnicodeDecodeError) as e:
                raise DataError(f"{path}: ledger is not valid JSON ({e})") from e

        if data.get("format") != LEDGER_FORMAT:
            raise DataError(f"{path}: not a training ledger")
        if data.get("version") != LEDGER_VERSION:
            raise DataError(
                f"{path}: ledger version {data.get('version')} (expected {LEDGER_VERSION})"
            )
        return cls(
            initial_path=data["initial_path"],
            rounds_path=data["rounds_path"],
            initial_indices=list(data["initial_indices"]),
            round_indices=[list(part) for part in data["round_indices"]],
            schema=data["schema"],
            seed=data.get("seed"),
            rounds=[
                RoundEntry(
                    round=int(e["round"]),
                    failed_indices=list(e["failed_indices"]),
                    cumulative_samples=int(e["cumulative_samples"]),
                )
                for e in data["rounds"]
            ],
            digest=data.get("digest", ""),
            created_at=data.get("created_at", ""),
            updated_at=data.get("updated_at", ""),
        )
