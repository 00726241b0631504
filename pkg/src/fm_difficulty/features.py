"""Sparse design rows for the factorization machine and dense tables for the forest.

Column layout of a schema of width ``P + L + A + B``::

    [0, P)            one-hot player
    [P, P+L)          one-hot level
    [P+L, P+L+A)      standardized player aggregates (first n observed levels)
    [P+L+A, width)    standardized level attributes

The two real-valued blocks exist only for augmented schemas.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .dataset import Dataset, InteractionRecord, Split

TELEMETRY_FIELDS = (
    "moves_used_ratio",
    "pregame_boosters",
    "ingame_boosters",
    "powerpieces_total",
    "powerpiece_combos",
    "rockets_solo",
    "rocket_bomb",
    "rocket_magic",
    "bomb_magic",
)
LEVEL_FLAGS = (
    "spreading_blocker_cg",
    "layer_cake_cg",
    "consecutive_blocker_cg",
    "mega_multicolor_blocker",
    "teleport",
)


class EncodingError(KeyError):
    def __str__(self):
        return self.args[0] if self.args else ""


def color_entropy(weights: Sequence[float]) -> float:
    """Shannon entropy (natural log) of color spawning weights, normalized internally."""
    w = np.asarray(weights, dtype=float)
    if w.size == 0 or not np.all(np.isfinite(w)):
        raise ValueError("weights must be a non-empty finite sequence")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights must not all be zero")
    p = w / total
    p = p[p > 0]
    return float(max(0.0, -np.sum(p * np.log(p))))


@dataclass(frozen=True)
class LevelAttributes:
    level_id: int
    avg_attempts_train: float
    color_entropy: float
    color_count: int
    flags: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.color_count < 1:
            raise ValueError(f"level {self.level_id}: color_count must be positive")
        if self.color_entropy < 0 or self.color_entropy > math.log(self.color_count) + 1e-9:
            raise ValueError(f"level {self.level_id}: color_entropy out of [0, ln(color_count)]")
        bad = {k: v for k, v in self.flags.items() if v not in (0, 1)}
        if bad:
            raise ValueError(f"level {self.level_id}: non-binary flags {bad}")


@dataclass(frozen=True)
class PlayerAggregates:
    player_id: str
    n_observed: int
    mean_attempts: float
    mean_moves_used_ratio: float = 0.0
    mean_pregame_boosters: float = 0.0
    mean_ingame_boosters: float = 0.0
    mean_powerpieces_total: float = 0.0
    mean_powerpiece_combos: float = 0.0
    mean_rockets_solo: float = 0.0
    mean_rocket_bomb: float = 0.0
    mean_rocket_magic: float = 0.0
    mean_bomb_magic: float = 0.0
    # telemetry fields that were absent and defaulted to 0
    missing: tuple[str, ...] = ()

    def values(self, telemetry: bool) -> tuple[float, ...]:
        vals = [self.mean_attempts]
        if telemetry:
            vals += [getattr(self, "mean_" + f) for f in TELEMETRY_FIELDS]
        return tuple(vals)


class Telemetry:
    """Per-record behaviour telemetry in columnar form, keyed by (player, level)."""

    def __init__(self, player_ids, level_ids, values, fields: Sequence[str] = TELEMETRY_FIELDS):
        self.player_ids = np.asarray(player_ids, dtype=object)
        self.level_ids = np.asarray(level_ids, dtype=np.int64)
        self.values = np.asarray(values, dtype=float).reshape(len(self.player_ids), len(fields))
        self.fields = tuple(fields)
        self._pos = {(p, int(lv)): i for i, (p, lv) in enumerate(zip(self.player_ids, self.level_ids))}

    def __len__(self):
        return len(self.player_ids)

    def lookup(self, player_id: str, level_id: int) -> np.ndarray | None:
        i = self._pos.get((player_id, level_id))
        return None if i is None else self.values[i]

    @classmethod
    def read_csv(cls, path: str | Path) -> "Telemetry":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            fields = [f for f in header if f not in ("player_id", "level_id")]
            pi, li = header.index("player_id"), header.index("level_id")
            fi = [header.index(f) for f in fields]
            pids, lids, vals = [], [], []
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    pids.append(row[pi])
                    lids.append(int(row[li]))
                    vals.append([float(row[j]) for j in fi])
                except (ValueError, IndexError):
                    raise ValueError(f"{path}: malformed telemetry row on line {line_no}") from None
        return cls(pids, lids, np.array(vals).reshape(len(pids), len(fields)), fields)

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("player_id", "level_id") + self.fields)
            for p, lv, row in zip(self.player_ids, self.level_ids, self.values):
                w.writerow([p, int(lv)] + [repr(float(x)) for x in row])


def read_level_attributes(path: str | Path) -> dict[int, LevelAttributes]:
    out = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        flag_cols = [c for c in reader.fieldnames or () if c.startswith("flag_")]
        for line_no, row in enumerate(reader, start=2):
            try:
                lv = int(row["level_id"])
                out[lv] = LevelAttributes(
                    level_id=lv,
                    avg_attempts_train=float(row["avg_attempts_train"]),
                    color_entropy=float(row["color_entropy"]),
                    color_count=int(row["color_count"]),
                    flags={c[len("flag_"):]: int(row[c]) for c in flag_cols},
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: bad level attribute row on line {line_no}: {exc}") from None
    return out


def write_level_attributes(attrs: Mapping[int, LevelAttributes], path: str | Path) -> None:
    flag_names = sorted({k for a in attrs.values() for k in a.flags})
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level_id", "avg_attempts_train", "color_entropy", "color_count"]
                   + ["flag_" + f for f in flag_names])
        for lv in sorted(attrs):
            a = attrs[lv]
            w.writerow([lv, repr(float(a.avg_attempts_train)), repr(float(a.color_entropy)), a.color_count]
                       + [int(a.flags.get(f, 0)) for f in flag_names])


def aggregate_player(records: Sequence[InteractionRecord], telemetry: Telemetry | None = None,
                     n_observed: int | None = None) -> PlayerAggregates:
    """Arithmetic means over a single player's records with ``level_id <= n_observed``."""
    if not records:
        raise ValueError("no records to aggregate")
    players = {r.player_id for r in records}
    if len(players) != 1:
        raise ValueError(f"records span multiple players: {sorted(players)}")
    if n_observed is not None:
        records = [r for r in records if r.level_id <= n_observed]
        if not records:
            raise ValueError(f"player {next(iter(players))!r} has no records up to level {n_observed}")
    pid = records[0].player_id
    kwargs = {"mean_attempts": float(np.mean([r.attempts for r in records]))}
    missing: list[str] = []
    if telemetry is not None:
        rows = [telemetry.lookup(pid, r.level_id) for r in records]
        rows = [r for r in rows if r is not None]
        for f in TELEMETRY_FIELDS:
            if f in telemetry.fields and rows:
                j = telemetry.fields.index(f)
                kwargs["mean_" + f] = float(np.mean([row[j] for row in rows]))
            else:
                missing.append(f)
    else:
        missing = list(TELEMETRY_FIELDS)
    return PlayerAggregates(player_id=pid, n_observed=len(records), missing=tuple(missing), **kwargs)


@dataclass(frozen=True)
class DesignRow:
    indices: np.ndarray
    values: np.ndarray
    target: float

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=float)
        if idx.shape != val.shape:
            raise ValueError("indices and values differ in length")
        if idx.size > 1 and np.any(np.diff(idx) <= 0):
            raise ValueError("indices must be strictly increasing")
        if not np.all(np.isfinite(val)):
            raise ValueError("row values must be finite")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)


@dataclass
class DesignMatrix:
    """Rows of a design in CSR form, with targets and the ids they came from."""

    X: sp.csr_matrix
    y: np.ndarray
    player_ids: np.ndarray
    level_ids: np.ndarray

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def width(self) -> int:
        return self.X.shape[1]

    def row(self, i: int) -> DesignRow:
        lo, hi = self.X.indptr[i], self.X.indptr[i + 1]
        return DesignRow(self.X.indices[lo:hi].copy(), self.X.data[lo:hi].copy(), float(self.y[i]))

    def rows(self) -> Iterable[DesignRow]:
        return (self.row(i) for i in range(len(self)))


@dataclass(frozen=True)
class FeatureSchema:
    players: tuple[str, ...]
    levels: tuple[int, ...]
    observed_levels: int
    player_features: tuple[str, ...] = ()
    level_features: tuple[str, ...] = ()
    # raw (unstandardized) feature values per entity
    player_values: Mapping[str, tuple[float, ...]] = field(default_factory=dict)
    level_values: Mapping[int, tuple[float, ...]] = field(default_factory=dict)
    center: tuple[float, ...] = ()
    scale: tuple[float, ...] = ()
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "_player_pos", {p: i for i, p in enumerate(self.players)})
        object.__setattr__(self, "_level_pos", {lv: i for i, lv in enumerate(self.levels)})

    @property
    def n_players(self) -> int:
        return len(self.players)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def augmented(self) -> bool:
        return bool(self.player_features or self.level_features)

    @property
    def n_real(self) -> int:
        return len(self.player_features) + len(self.level_features)

    @property
    def width(self) -> int:
        return self.n_players + self.n_levels + self.n_real

    def player_column(self, player_id: str) -> int:
        try:
            return self._player_pos[player_id]
        except KeyError:
            raise EncodingError(f"player {player_id!r} is not in the schema") from None

    def level_column(self, level_id: int) -> int:
        try:
            return self.n_players + self._level_pos[level_id]
        except KeyError:
            raise EncodingError(f"level {level_id} is not in the schema") from None

    def decode(self, column: int) -> tuple[str, object]:
        """Map a column index back to ``(block, entity or feature name)``."""
        if column < 0 or column >= self.width:
            raise IndexError(column)
        if column < self.n_players:
            return "player", self.players[column]
        column -= self.n_players
        if column < self.n_levels:
            return "level", self.levels[column]
        column -= self.n_levels
        if column < len(self.player_features):
            return "player_feature", self.player_features[column]
        return "level_feature", self.level_features[column - len(self.player_features)]

    @property
    def column_names(self) -> list[str]:
        return ([f"player={p}" for p in self.players] + [f"level={lv}" for lv in self.levels]
                + list(self.player_features) + list(self.level_features))

    @property
    def real_feature_names(self) -> list[str]:
        return list(self.player_features) + list(self.level_features)

    def block_ids(self) -> np.ndarray:
        """Block label per column: 0 player, 1 level, 2 player features, 3 level features."""
        sizes = [self.n_players, self.n_levels, len(self.player_features), len(self.level_features)]
        return np.repeat(np.arange(4), sizes)

    def raw_features(self, player_id: str, level_id: int) -> np.ndarray:
        try:
            pv = self.player_values[player_id]
        except KeyError:
            raise EncodingError(f"player {player_id!r} has no aggregates in the schema") from None
        try:
            lv = self.level_values[level_id]
        except KeyError:
            raise EncodingError(f"level {level_id} has no attributes in the schema") from None
        return np.array(tuple(pv) + tuple(lv), dtype=float)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["player_values"] = {p: list(v) for p, v in self.player_values.items()}
        d["level_values"] = {str(k): list(v) for k, v in self.level_values.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSchema":
        return cls(
            players=tuple(d["players"]),
            levels=tuple(int(x) for x in d["levels"]),
            observed_levels=int(d["observed_levels"]),
            player_features=tuple(d.get("player_features", ())),
            level_features=tuple(d.get("level_features", ())),
            player_values={p: tuple(v) for p, v in d.get("player_values", {}).items()},
            level_values={int(k): tuple(v) for k, v in d.get("level_values", {}).items()},
            center=tuple(d.get("center", ())),
            scale=tuple(d.get("scale", ())),
            notes=tuple(d.get("notes", ())),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSchema":
        return cls.from_dict(json.loads(Path(path).read_text()))


def level_average_attempts(train: Dataset, exclude_players: Iterable[str] = ()) -> dict[int, float]:
    excl = set(exclude_players)
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for r in train.records:
        if r.player_id in excl:
            continue
        sums[r.level_id] = sums.get(r.level_id, 0.0) + r.attempts
        counts[r.level_id] = counts.get(r.level_id, 0) + 1
    return {lv: sums[lv] / counts[lv] for lv in sums}


def build_schema(split: Split, level_attributes: Mapping[int, LevelAttributes] | None = None,
                 telemetry: Telemetry | None = None, augment: bool = False) -> FeatureSchema:
    """Build the column layout (and feature tables when ``augment``) from the train side."""
    train = split.train
    n = split.spec.observed_levels
    players = tuple(train.players)
    levels = tuple(train.levels)
    if not augment:
        return FeatureSchema(players=players, levels=levels, observed_levels=n)

    notes = []
    use_telemetry = telemetry is not None
    if not use_telemetry:
        notes.append("telemetry absent: player block holds mean_attempts only")
    player_features = ("player_mean_attempts",)
    if use_telemetry:
        player_features += tuple("player_mean_" + f for f in TELEMETRY_FIELDS)

    player_values = {}
    for pid, recs in train.by_player().items():
        agg = aggregate_player(recs, telemetry, n_observed=n)
        player_values[pid] = agg.values(use_telemetry)
        if use_telemetry and agg.missing:
            notes.append(f"player {pid}: telemetry missing for {','.join(agg.missing)}")

    avg = level_average_attempts(train, exclude_players=split.test_players)
    flag_names: tuple[str, ...] = ()
    if level_attributes:
        flag_names = tuple(sorted({k for a in level_attributes.values() for k in a.flags}))
    level_features = ("level_avg_attempts_train",)
    if level_attributes:
        level_features += ("level_color_entropy", "level_color_count") + tuple("level_flag_" + f for f in flag_names)
    else:
        notes.append("level attributes absent: level block holds avg_attempts_train only")

    level_values = {}
    for lv in levels:
        vals = [avg.get(lv, math.nan)]
        if level_attributes:
            a = level_attributes.get(lv)
            if a is None:
                raise EncodingError(f"level {lv} has no attribute row")
            vals += [a.color_entropy, float(a.color_count)] + [float(a.flags.get(f, 0)) for f in flag_names]
        level_values[lv] = tuple(vals)
    # levels only observed by test players get the global training mean
    fallback = float(np.mean([v for v in avg.values()])) if avg else 1.0
    level_values = {lv: (v[0] if not math.isnan(v[0]) else fallback,) + v[1:] for lv, v in level_values.items()}

    # standardize with train-row statistics
    draft = FeatureSchema(players=players, levels=levels, observed_levels=n,
                          player_features=player_features, level_features=level_features,
                          player_values=player_values, level_values=level_values)
    rows = _real_block(train, draft)
    center = rows.mean(axis=0)
    scale = rows.std(axis=0)
    scale[scale == 0] = 1.0

    return FeatureSchema(
        players=players,
        levels=levels,
        observed_levels=n,
        player_features=player_features,
        level_features=level_features,
        player_values=player_values,
        level_values=level_values,
        center=tuple(float(c) for c in center),
        scale=tuple(float(s) for s in scale),
        notes=tuple(notes),
    )


def _entity_columns(dataset: Dataset, schema: FeatureSchema) -> tuple[np.ndarray, np.ndarray]:
    pid, lid, _ = dataset.arrays()
    pcol = np.fromiter((schema.player_column(p) for p in pid), dtype=np.int64, count=len(pid))
    lcol = np.fromiter((schema.level_column(int(lv)) for lv in lid), dtype=np.int64, count=len(lid))
    return pcol, lcol


def _real_block(dataset: Dataset, schema: FeatureSchema) -> np.ndarray:
    pid, lid, _ = dataset.arrays()
    if len(pid) == 0:
        return np.zeros((0, schema.n_real))
    ppos = {p: i for i, p in enumerate(schema.player_values)}
    lpos = {lv: i for i, lv in enumerate(schema.level_values)}
    try:
        pi = np.fromiter((ppos[p] for p in pid), dtype=np.int64, count=len(pid))
    except KeyError as exc:
        raise EncodingError(f"player {exc.args[0]!r} has no aggregates in the schema") from None
    try:
        li = np.fromiter((lpos[int(x)] for x in lid), dtype=np.int64, count=len(lid))
    except KeyError as exc:
        raise EncodingError(f"level {exc.args[0]} has no attributes in the schema") from None
    P = np.array(list(schema.player_values.values()), dtype=float).reshape(len(ppos), -1)
    L = np.array(list(schema.level_values.values()), dtype=float).reshape(len(lpos), -1)
    return np.hstack([P[pi], L[li]])


def build_fm_rows(dataset: Dataset | Split, schema: FeatureSchema, augment: bool = False,
                  part: str = "train") -> DesignMatrix:
    """Encode records as FM design rows.

    ``dataset`` may be a :class:`Split`, in which case ``part`` picks
    ``train``, ``test`` or ``horizon``. Plain rows are two-hot; augmented rows
    append the standardized real-valued blocks. Test players only ever carry
    aggregates computed from their observed levels because the schema was
    built from the train side.
    """
    if isinstance(dataset, Split):
        dataset = getattr(dataset, part)
    if augment and not schema.augmented:
        raise ValueError("augmented rows need a schema built with augment=True")
    n = len(dataset)
    pcol, lcol = _entity_columns(dataset, schema)
    if augment:
        real = (_real_block(dataset, schema) - np.asarray(schema.center)) / np.asarray(schema.scale)
        base = schema.n_players + schema.n_levels
        cols = np.hstack([pcol[:, None], lcol[:, None],
                          np.broadcast_to(np.arange(base, schema.width), (n, schema.n_real))])
        vals = np.hstack([np.ones((n, 2)), real])
    else:
        cols = np.column_stack([pcol, lcol])
        vals = np.ones((n, 2))
    nnz = cols.shape[1]
    X = sp.csr_matrix((vals.ravel(), cols.ravel(), np.arange(0, n * nnz + 1, nnz)),
                      shape=(n, schema.width))
    X.eliminate_zeros()
    pid, lid, att = dataset.arrays()
    return DesignMatrix(X=X, y=np.array(att, dtype=float), player_ids=pid, level_ids=lid)


def build_rf_matrix(dataset: Dataset | Split, schema: FeatureSchema,
                    part: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Dense unstandardized player-aggregate and level-attribute features, no identities."""
    if isinstance(dataset, Split):
        dataset = getattr(dataset, part)
    if not schema.augmented:
        raise ValueError("forest features need a schema built with augment=True")
    X = _real_block(dataset, schema)
    _, _, att = dataset.arrays()
    return X, np.array(att, dtype=float)
