"""Interaction telemetry ingestion and the player-level train/test protocol."""

from __future__ import annotations

import csv
import json
import logging
import math
from functools import cached_property
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 30
CSV_COLUMNS = ("player_id", "level_id", "attempts")


class DataValidationError(ValueError):
    """A record violates the telemetry contract."""


class CsvParseError(DataValidationError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ProtocolError(ValueError):
    """The split protocol cannot be executed on the given data."""


def truncate_attempts(a: int) -> int:
    """Cap an attempt count at 30."""
    if a < 1:
        raise DataValidationError(f"attempts must be >= 1, got {a}")
    return min(int(a), MAX_ATTEMPTS)


@dataclass(frozen=True)
class InteractionRecord:
    player_id: str
    level_id: int
    attempts: int


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of interaction records plus dense entity indices.

    Records are kept sorted by ``(player_id, level_id)``. ``player_index`` and
    ``level_index`` map ids to contiguous column indices starting at 0, in
    sorted id order.
    """

    records: tuple[InteractionRecord, ...]
    player_index: dict[str, int]
    level_index: dict[int, int]
    max_level: int

    def __repr__(self) -> str:
        return (f"Dataset({len(self.records)} records, {len(self.player_index)} players, "
                f"{len(self.level_index)} levels, max_level={self.max_level})")

    @classmethod
    def from_records(cls, records: Iterable[InteractionRecord]) -> "Dataset":
        recs = sorted(records, key=lambda r: (r.player_id, r.level_id))
        seen = set()
        for r in recs:
            if r.attempts < 1:
                raise DataValidationError(
                    f"attempts must be >= 1 for ({r.player_id}, {r.level_id})")
            key = (r.player_id, r.level_id)
            if key in seen:
                raise DataValidationError(f"duplicate record for player {r.player_id!r}, level {r.level_id}")
            seen.add(key)
        players = sorted({r.player_id for r in recs})
        levels = sorted({r.level_id for r in recs})
        return cls(
            records=tuple(recs),
            player_index={p: i for i, p in enumerate(players)},
            level_index={lv: i for i, lv in enumerate(levels)},
            max_level=max(levels) if levels else 0,
        )

    def __len__(self) -> int:
        return len(self.records)

    @property
    def players(self) -> list[str]:
        return list(self.player_index)

    @property
    def levels(self) -> list[int]:
        return list(self.level_index)

    @cached_property
    def _arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pid = np.array([r.player_id for r in self.records], dtype=object)
        lid = np.fromiter((r.level_id for r in self.records), dtype=np.int64, count=len(self))
        att = np.fromiter((r.attempts for r in self.records), dtype=np.float64, count=len(self))
        for a in (pid, lid, att):
            a.flags.writeable = False
        return pid, lid, att

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return read-only ``(player_ids, level_ids, attempts)`` arrays."""
        return self._arrays

    def by_player(self) -> dict[str, list[InteractionRecord]]:
        out: dict[str, list[InteractionRecord]] = {}
        for r in self.records:
            out.setdefault(r.player_id, []).append(r)
        return out

    def subset(self, keep) -> "Dataset":
        return Dataset.from_records(r for r in self.records if keep(r))


def load_interactions(path: str | Path) -> Dataset:
    """Read a ``player_id,level_id,attempts`` CSV, truncating attempts at 30."""
    path = Path(path)
    records = []
    seen: dict[tuple[str, int], int] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvParseError(1, "empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise CsvParseError(1, f"missing columns {missing}")
        pos = [header.index(c) for c in CSV_COLUMNS]
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvParseError(line_no, f"expected {len(header)} fields, got {len(row)}")
            player, level_s, att_s = (row[i].strip() for i in pos)
            try:
                level = int(level_s)
                attempts = int(att_s)
            except ValueError:
                raise CsvParseError(line_no, f"non-integer level_id/attempts {level_s!r}, {att_s!r}") from None
            if level < 1:
                raise CsvParseError(line_no, f"level_id must be positive, got {level}")
            if attempts < 1:
                raise CsvParseError(line_no, f"attempts must be >= 1, got {attempts}")
            key = (player, level)
            if key in seen:
                raise CsvParseError(line_no, f"duplicate record for player {player!r}, level {level} "
                                             f"(first seen on line {seen[key]})")
            seen[key] = line_no
            records.append(InteractionRecord(player, level, truncate_attempts(attempts)))
    return Dataset.from_records(records)


def write_interactions(dataset: Dataset, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in dataset.records:
            writer.writerow((r.player_id, r.level_id, r.attempts))


@dataclass(frozen=True)
class SplitSpec:
    observed_levels: int
    test_fraction: float = 0.01
    eval_level_floor: int = 150
    seed: int = 0
    # players need complete histories up to this level; None means floor + 50
    eligibility_level: int | None = None

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.observed_levels < 1:
            raise ValueError("observed_levels must be positive")
        if self.observed_levels > self.eval_level_floor:
            raise ValueError(
                f"observed_levels ({self.observed_levels}) exceeds eval_level_floor ({self.eval_level_floor})")

    @property
    def required_level(self) -> int:
        if self.eligibility_level is not None:
            return self.eligibility_level
        return self.eval_level_floor + 50


@dataclass(frozen=True)
class Split:
    train: Dataset
    test: Dataset
    test_players: frozenset[str]
    spec: SplitSpec
    n_excluded: int = 0
    # test-player records beyond the observation horizon, used for per-level curves
    horizon: Dataset = field(default=None, repr=False)

    def manifest(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "test_players": sorted(self.test_players),
            "n_train_records": len(self.train),
            "n_test_records": len(self.test),
            "n_excluded_players": self.n_excluded,
        }

    def write_manifest(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")


def eligible_players(d: Dataset, required_level: int) -> list[str]:
    """Players whose history covers every level from 1 to ``required_level``."""
    out = []
    for pid, recs in d.by_player().items():
        levels = {r.level_id for r in recs}
        if all(lv in levels for lv in range(1, required_level + 1)):
            out.append(pid)
    return sorted(out)


def select_test_players(players: Sequence[str], fraction: float, seed: int) -> list[str]:
    players = sorted(players)
    n_test = max(1, int(round(fraction * len(players))))
    perm = np.random.default_rng(seed).permutation(len(players))
    return sorted(players[i] for i in perm[:n_test])


def split_players(d: Dataset, spec: SplitSpec) -> Split:
    """Hold out a seeded fraction of players; train sees only their first levels."""
    if len(d) == 0:
        raise ProtocolError("dataset is empty")
    eligible = eligible_players(d, spec.required_level)
    n_excluded = len(d.player_index) - len(eligible)
    if n_excluded:
        logger.warning("excluded %d players without complete history up to level %d",
                       n_excluded, spec.required_level)
    if len(eligible) < 2:
        raise ProtocolError(f"need at least 2 eligible players, found {len(eligible)}")
    test_players = frozenset(select_test_players(eligible, spec.test_fraction, spec.seed))
    if len(test_players) >= len(eligible):
        raise ProtocolError("split leaves no training players")
    eligible_set = set(eligible)

    train, test, horizon = [], [], []
    for r in d.records:
        if r.player_id not in eligible_set:
            continue
        if r.player_id not in test_players:
            train.append(r)
        elif r.level_id <= spec.observed_levels:
            train.append(r)
        else:
            horizon.append(r)
            if r.level_id > spec.eval_level_floor:
                test.append(r)
    return Split(
        train=Dataset.from_records(train),
        test=Dataset.from_records(test),
        test_players=test_players,
        spec=spec,
        n_excluded=n_excluded,
        horizon=Dataset.from_records(horizon),
    )


def truncation_fraction(raw_attempts: Iterable[int]) -> float:
    a = np.asarray(list(raw_attempts))
    return float(np.mean(a > MAX_ATTEMPTS)) if a.size else math.nan
