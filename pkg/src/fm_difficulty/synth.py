"""Synthetic puzzle-game telemetry with known latent skill and difficulty.

Per-attempt success probability for player ``u`` on level ``l``::

    p = clip(sigmoid(b0 - d_l + s_u + r_ul + gamma * c_u * a_l), p_min, 1)

and attempts to first completion are geometric on ``{1, 2, ...}`` with that
probability, truncated at 30. ``r_ul`` is a per-player stationary AR(1)
(discretized Ornstein-Uhlenbeck) process over the level sequence: a player's
form wanders slowly around their long-run skill, so what early levels reveal
about them goes stale the further ahead one predicts, while the population
spread of effective skill stays constant across levels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import MAX_ATTEMPTS, Dataset, InteractionRecord, Split, write_interactions
from .evaluation import mae, rmse
from .features import LEVEL_FLAGS, TELEMETRY_FIELDS, LevelAttributes, Telemetry, color_entropy, write_level_attributes


@dataclass(frozen=True)
class SynthConfig:
    n_players: int = 200
    n_levels: int = 300
    seed: int = 0
    skill_sd: float = 0.7
    interaction: float = 0.5
    # stationary sd and correlation length (levels) of the transient form term
    drift_sd: float = 0.6
    drift_length: float = 300.0
    base_logit: float = 0.8
    ramp_per_level: float = 0.001
    wave_amplitude: float = 0.35
    wave_period: float = 17.0
    level_noise_sd: float = 0.45
    tutorial_dip: float = 1.2
    p_min: float = 1.0 / MAX_ATTEMPTS

    def __post_init__(self):
        if self.n_players < 1 or self.n_levels < 1:
            raise ValueError("n_players and n_levels must be positive")
        for name in ("skill_sd", "interaction", "drift_sd", "wave_period", "level_noise_sd", "p_min",
                     "drift_length"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.p_min > 1:
            raise ValueError("p_min must be <= 1")


@dataclass
class SynthTruth:
    player_ids: list[str]
    level_ids: np.ndarray
    skill: np.ndarray         # s_u
    drift: np.ndarray         # (players, levels) transient form offset
    consistency: np.ndarray   # c_u
    difficulty: np.ndarray    # d_l
    amplifier: np.ndarray     # a_l
    tutorial: np.ndarray      # bool per level
    p: np.ndarray             # (players, levels)
    p_min: float

    def player_pos(self) -> dict[str, int]:
        return {pid: i for i, pid in enumerate(self.player_ids)}

    def level_pos(self) -> dict[int, int]:
        return {int(lv): i for i, lv in enumerate(self.level_ids)}

    def success_prob(self, player_ids, level_ids) -> np.ndarray:
        pp, lp = self.player_pos(), self.level_pos()
        try:
            pi = np.fromiter((pp[p] for p in player_ids), dtype=np.int64)
            li = np.fromiter((lp[int(lv)] for lv in level_ids), dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"id {exc.args[0]!r} is not part of the synthetic truth") from None
        return self.p[pi, li]

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["player_id", "level_id", "p", "skill", "drift", "consistency",
                        "difficulty", "amplifier", "tutorial"])
            for i, pid in enumerate(self.player_ids):
                for j, lv in enumerate(self.level_ids):
                    w.writerow([pid, int(lv), repr(float(self.p[i, j])), repr(float(self.skill[i])),
                                repr(float(self.drift[i, j])), repr(float(self.consistency[i])),
                                repr(float(self.difficulty[j])), repr(float(self.amplifier[j])),
                                int(self.tutorial[j])])


def read_truth(path: str | Path) -> tuple[dict[str, float], dict[int, float]]:
    """Per-player skill and per-level difficulty from a ``truth.csv``."""
    skill, difficulty = {}, {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            skill.setdefault(row["player_id"], float(row["skill"]))
            difficulty.setdefault(int(row["level_id"]), float(row["difficulty"]))
    return skill, difficulty


@dataclass
class SynthOutput:
    dataset: Dataset
    truth: SynthTruth
    level_attributes: dict[int, LevelAttributes]
    telemetry: Telemetry
    raw_attempts: np.ndarray

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "interactions": out / "interactions.csv",
            "level_attributes": out / "level_attributes.csv",
            "telemetry": out / "telemetry.csv",
            "truth": out / "truth.csv",
        }
        write_interactions(self.dataset, paths["interactions"])
        write_level_attributes(self.level_attributes, paths["level_attributes"])
        self.telemetry.write_csv(paths["telemetry"])
        self.truth.write_csv(paths["truth"])
        return paths


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def difficulty_curve(config: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Slow ramp plus a wave and per-level noise, with easy tutorial levels.

    Levels 1-10 and every tenth level from 21 on are tutorials.
    """
    lv = np.arange(1, config.n_levels + 1)
    d = (config.ramp_per_level * lv
         + config.wave_amplitude * np.sin(2 * np.pi * lv / config.wave_period)
         + rng.normal(0.0, config.level_noise_sd, size=lv.size))
    tutorial = (lv <= 10) | ((lv > 20) & (lv % 10 == 1))
    d = np.where(tutorial, d - config.tutorial_dip, d)
    return d, tutorial


def _ar1(n_rows: int, n_steps: int, sd: float, length: float, rng: np.random.Generator) -> np.ndarray:
    """Stationary AR(1) paths with marginal sd ``sd`` and lag correlation ``exp(-lag / length)``."""
    rho = math.exp(-1.0 / length)
    eps = rng.normal(0.0, sd * math.sqrt(1.0 - rho * rho), size=(n_rows, n_steps))
    out = np.empty((n_rows, n_steps))
    out[:, 0] = rng.normal(0.0, sd, size=n_rows)
    for j in range(1, n_steps):
        out[:, j] = rho * out[:, j - 1] + eps[:, j]
    return out


def sample_attempts(p, rng: np.random.Generator, cap: int | None = MAX_ATTEMPTS) -> np.ndarray:
    """Attempts to first success, each attempt succeeding with probability ``p``."""
    a = rng.geometric(np.asarray(p, dtype=float))
    return a if cap is None else np.minimum(a, cap)


def truncated_geometric_mean(p, cap: int = MAX_ATTEMPTS) -> np.ndarray:
    """``E[min(G, cap)]`` for ``G`` geometric on {1, 2, ...}: ``(1 - (1-p)^cap) / p``."""
    p = np.asarray(p, dtype=float)
    q = 1.0 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        m = (1.0 - q ** cap) / p
    return np.where(p > 0, m, float(cap))


def generate(config: SynthConfig = SynthConfig()) -> SynthOutput:
    rng = np.random.default_rng(config.seed)
    n_p, n_l = config.n_players, config.n_levels
    width = max(4, len(str(n_p)))
    player_ids = [f"p{i:0{width}d}" for i in range(1, n_p + 1)]
    level_ids = np.arange(1, n_l + 1)

    difficulty, tutorial = difficulty_curve(config, rng)
    amplifier = np.exp(rng.normal(0.0, 0.35, size=n_l)) * np.where(tutorial, 0.3, 1.0)
    skill = rng.normal(0.0, config.skill_sd, size=n_p)
    consistency = rng.normal(0.0, 1.0, size=n_p)
    drift = _ar1(n_p, n_l, config.drift_sd, config.drift_length, rng)

    eff_skill = skill[:, None] + drift
    logit = (config.base_logit - difficulty[None, :] + eff_skill
             + config.interaction * consistency[:, None] * amplifier[None, :])
    p = np.clip(sigmoid(logit), config.p_min, 1.0)

    raw = sample_attempts(p, rng, cap=None)
    attempts = np.minimum(raw, MAX_ATTEMPTS)
    records = [InteractionRecord(pid, int(lv), int(attempts[i, j]))
               for i, pid in enumerate(player_ids) for j, lv in enumerate(level_ids)]
    dataset = Dataset.from_records(records)

    telemetry = _telemetry(player_ids, level_ids, eff_skill, consistency, difficulty, attempts, rng)
    attrs = _level_attributes(level_ids, difficulty, tutorial, attempts, rng)
    truth = SynthTruth(player_ids, level_ids, skill, drift, consistency, difficulty, amplifier,
                       tutorial, p, config.p_min)
    return SynthOutput(dataset, truth, attrs, telemetry, raw.ravel())


def _telemetry(player_ids, level_ids, eff_skill, consistency, difficulty, attempts, rng) -> Telemetry:
    n_p, n_l = eff_skill.shape
    s = eff_skill
    c = consistency[:, None] * np.ones((1, n_l))
    d = np.broadcast_to(difficulty[None, :], (n_p, n_l))
    cols = {
        "moves_used_ratio": np.clip(0.75 - 0.12 * s + 0.02 * (attempts - 1) + rng.normal(0, 0.08, s.shape), 0.05, None),
        "pregame_boosters": rng.poisson(np.exp(-1.0 - 0.5 * s + 0.3 * d)),
        "ingame_boosters": rng.poisson(np.exp(-1.2 - 0.4 * s + 0.3 * d)),
        "powerpieces_total": rng.poisson(np.exp(1.5 + 0.25 * s)),
        "powerpiece_combos": rng.poisson(np.exp(0.2 + 0.3 * s - 0.3 * c)),
        "rockets_solo": rng.poisson(np.exp(1.0 + 0.1 * s)),
        "rocket_bomb": rng.poisson(np.exp(-0.5 + 0.3 * s)),
        "rocket_magic": rng.poisson(np.exp(-1.0 - 0.3 * c)),
        "bomb_magic": rng.poisson(np.exp(-1.3 + 0.3 * s - 0.2 * c)),
    }
    values = np.stack([np.asarray(cols[f], dtype=float).ravel() for f in TELEMETRY_FIELDS], axis=1)
    pids = np.repeat(np.array(player_ids, dtype=object), n_l)
    lids = np.tile(level_ids, n_p)
    return Telemetry(pids, lids, values, TELEMETRY_FIELDS)


def _level_attributes(level_ids, difficulty, tutorial, attempts, rng) -> dict[int, LevelAttributes]:
    hard = difficulty >= np.quantile(difficulty, 0.85)
    out = {}
    avg = attempts.mean(axis=0)
    for j, lv in enumerate(level_ids):
        n_colors = int(rng.integers(4, 7))
        # harder levels spawn colors more uniformly
        concentration = 6.0 if hard[j] else (0.8 if tutorial[j] else 2.0)
        weights = rng.dirichlet(np.full(n_colors, concentration))
        flag_p = 0.6 if hard[j] else 0.08
        flags = {f: int(rng.random() < flag_p) for f in LEVEL_FLAGS}
        out[int(lv)] = LevelAttributes(int(lv), float(avg[j]), color_entropy(weights), n_colors, flags)
    return out


@dataclass(frozen=True)
class OracleReport:
    mae: float
    rmse: float
    n: int
    predictions: np.ndarray


def oracle_metrics(truth: SynthTruth, split: Split | Dataset) -> OracleReport:
    """Error of the Bayes-optimal mean predictor on the test records."""
    test = split.test if isinstance(split, Split) else split
    pid, lid, att = test.arrays()
    if len(pid) == 0:
        raise ValueError("empty test set")
    pred = truncated_geometric_mean(truth.success_prob(pid, lid))
    return OracleReport(mae(pred, att), rmse(pred, att), len(pid), pred)


def truncation_share(out: SynthOutput) -> float:
    return float(np.mean(out.raw_attempts > MAX_ATTEMPTS))


def expected_attempts(p: float, cap: int = MAX_ATTEMPTS) -> float:
    return float(truncated_geometric_mean(p, cap)) if p > 0 else math.nan
