"""Error metrics and the observed-level sweep protocol.

For every seed the same test players are held out at every checkpoint; only
the number of their early levels shown to the models changes. Metrics are
always scored on levels above the evaluation floor, while per-level curves use
every level past the observation horizon.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

METHODS = ("naive", "rf", "fm", "fm_feat")
DEFAULT_CHECKPOINTS = (10, 20, 30, 50, 100, 150)


class ConfigurationError(ValueError):
    pass


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=float).ravel()
    t = np.asarray(truth, dtype=float).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise ValueError("empty input")
    return p, t


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def row_interval(values, z: float = 1.96) -> tuple[float, float]:
    """Normal-approximation interval ``mean +- z * sd / sqrt(n)`` for a per-row mean."""
    v = np.asarray(values, dtype=float)
    m = float(v.mean())
    if v.size < 2:
        return m, m
    half = z * float(v.std(ddof=1)) / math.sqrt(v.size)
    return m - half, m + half


def rmse_interval(pred, truth, z: float = 1.96) -> tuple[float, float]:
    """Interval on the mean squared error, mapped through the square root."""
    p, t = _pair(pred, truth)
    lo, hi = row_interval((p - t) ** 2, z)
    return math.sqrt(max(lo, 0.0)), math.sqrt(hi)


def seed_interval(values, level: float = 0.95) -> tuple[float, float] | None:
    """Student-t interval over per-seed metrics; None with fewer than 3 seeds."""
    v = np.asarray(values, dtype=float)
    if v.size < 3:
        return None
    m = float(v.mean())
    half = float(stats.t.ppf(0.5 + level / 2, v.size - 1)) * float(v.std(ddof=1)) / math.sqrt(v.size)
    return m - half, m + half


def centered_rolling_mean(values, window: int = 12) -> np.ndarray:
    """Centered moving average; edge positions average the part of the window that exists.

    Position ``i`` averages ``values[i - window // 2 : i + (window - 1) // 2 + 1]``.
    """
    if window < 1:
        raise ValueError("window must be positive")
    v = np.asarray(values, dtype=float)
    n = v.size
    c = np.concatenate([[0.0], np.cumsum(v)])
    i = np.arange(n)
    lo = np.maximum(i - window // 2, 0)
    hi = np.minimum(i + (window - 1) // 2 + 1, n)
    return (c[hi] - c[lo]) / (hi - lo)


@dataclass
class LevelCurve:
    levels: np.ndarray
    raw_diff: np.ndarray
    smoothed_diff: np.ndarray


def per_level_error_curve(level_ids, method_pred, baseline_pred, truth, window: int = 12) -> LevelCurve:
    """Per-level ``MAE(method) - MAE(baseline)`` and its centered rolling mean.

    Negative values mean the method beats the baseline on that level.
    """
    lid = np.asarray(level_ids, dtype=np.int64)
    if lid.size == 0:
        raise ValueError("empty level range")
    m_err = np.abs(np.asarray(method_pred, dtype=float) - truth)
    b_err = np.abs(np.asarray(baseline_pred, dtype=float) - truth)
    levels, inv = np.unique(lid, return_inverse=True)
    if levels[-1] - levels[0] + 1 != levels.size:
        raise ValueError("levels must form a contiguous range")
    cnt = np.bincount(inv)
    diff = np.bincount(inv, weights=m_err) / cnt - np.bincount(inv, weights=b_err) / cnt
    return LevelCurve(levels, diff, centered_rolling_mean(diff, window))


@dataclass(frozen=True)
class SweepSpec:
    checkpoints: tuple[int, ...] = DEFAULT_CHECKPOINTS
    methods: tuple[str, ...] = ("naive", "fm")
    factor_counts: tuple[int, ...] = (2,)
    seeds: tuple[int, ...] = (0,)
    iterations: int = 1000
    burn_in: int = 50
    init_stdev: float = 1.0
    feat_init_stdev: float = 0.1
    n_estimators: int = 150
    window: int = 12
    group_by_block: bool = False

    def __post_init__(self):
        cp = list(self.checkpoints)
        if not cp or any(b <= a for a, b in zip(cp, cp[1:])) or cp[0] < 1:
            raise ValueError("checkpoints must be positive and strictly increasing")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if not self.seeds:
            raise ValueError("need at least one seed")


@dataclass
class PredictionDump:
    method: str
    k: int
    checkpoint: int
    seed: int
    player_ids: np.ndarray
    level_ids: np.ndarray
    truth: np.ndarray
    pred: np.ndarray

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["player_id", "level_id", "truth", "pred"])
            for row in zip(self.player_ids, self.level_ids, self.truth, self.pred):
                w.writerow([row[0], int(row[1]), repr(float(row[2])), repr(float(row[3]))])


@dataclass
class MetricCell:
    mae: float
    rmse: float
    ci95_mae: tuple[float, float]
    ci95_rmse: tuple[float, float]
    n_test_rows: int
    seed_mae: list[float] = field(default_factory=list)
    seed_rmse: list[float] = field(default_factory=list)
    seed_ci95_mae: tuple[float, float] | None = None
    seed_ci95_rmse: tuple[float, float] | None = None


CellKey = tuple  # (method, k, checkpoint)


@dataclass
class EvaluationReport:
    spec: SweepSpec
    eval_level_floor: int
    cells: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    dumps: list[PredictionDump] = field(default_factory=list)
    models: dict = field(default_factory=dict)
    splits: dict = field(default_factory=dict)

    def cell(self, method: str, checkpoint: int, k: int | None = None) -> MetricCell:
        return self.cells[(method, _k_for(method, k, self.spec), checkpoint)]

    def curve(self, method: str, checkpoint: int, k: int | None = None) -> LevelCurve:
        return self.curves[(method, _k_for(method, k, self.spec), checkpoint)]

    def dumps_for(self, method: str, checkpoint: int, k: int | None = None) -> list[PredictionDump]:
        kk = _k_for(method, k, self.spec)
        return [d for d in self.dumps if d.method == method and d.k == kk and d.checkpoint == checkpoint]

    def to_dict(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "eval_level_floor": self.eval_level_floor,
            "cells": [{"method": m, "k": k, "checkpoint": c, **asdict(v)} for (m, k, c), v in self.cells.items()],
            "curves": [{"method": m, "k": k, "checkpoint": c, "levels": v.levels.tolist(),
                        "raw_diff": v.raw_diff.tolist(), "smoothed_diff": v.smoothed_diff.tolist()}
                       for (m, k, c), v in self.curves.items()],
        }

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "report.json", out / "sweep_metrics.csv", out / "level_curve.csv"]
        written[0].write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        with written[1].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "k", "checkpoint", "mae", "rmse", "ci_lo", "ci_hi",
                        "rmse_ci_lo", "rmse_ci_hi", "seed_ci_lo", "seed_ci_hi", "n_test_rows"])
            for (m, k, c), v in self.cells.items():
                s = v.seed_ci95_mae or ("", "")
                w.writerow([m, k, c, repr(v.mae), repr(v.rmse), repr(v.ci95_mae[0]), repr(v.ci95_mae[1]),
                            repr(v.ci95_rmse[0]), repr(v.ci95_rmse[1]), *map(_fmt, s), v.n_test_rows])
        with written[2].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "k", "checkpoint", "level", "raw_diff", "smoothed_diff"])
            for (m, k, c), v in self.curves.items():
                for lv, r, sm in zip(v.levels, v.raw_diff, v.smoothed_diff):
                    w.writerow([_label(m, k), k, c, int(lv), repr(float(r)), repr(float(sm))])
        many_seeds = len(self.spec.seeds) > 1
        for d in self.dumps:
            sub = out / f"seed_{d.seed}" if many_seeds else out
            sub.mkdir(exist_ok=True)
            path = sub / f"predictions_{_label(d.method, d.k)}_{d.checkpoint}.csv"
            d.write_csv(path)
            written.append(path)
        return written


def _fmt(x) -> str:
    return repr(float(x)) if x != "" else ""


def _label(method: str, k: int) -> str:
    return f"{method}-{k}" if method in ("fm", "fm_feat") else method


def _k_for(method: str, k: int | None, spec: SweepSpec) -> int:
    if method not in ("fm", "fm_feat"):
        return 0
    if k is None:
        if len(spec.factor_counts) != 1:
            raise KeyError("k is ambiguous for this sweep")
        return spec.factor_counts[0]
    return k


def run_sweep(data, spec: SweepSpec, split_spec, level_attributes: Mapping | None = None,
              telemetry=None, keep_models: bool = False,
              progress: Callable[[str], None] | None = None) -> EvaluationReport:
    """Refit every method at every checkpoint and score the fixed test set.

    ``split_spec`` is a template whose ``observed_levels`` and ``seed`` are
    replaced per run. Each seed also seeds the MCMC chains and the forest.
    """
    from .baselines import ForestConfig, fit_forest, fit_naive, predict_forest, predict_naive_batch
    from .dataset import split_players
    from .features import build_fm_rows, build_rf_matrix, build_schema
    from .fm import clamp
    from .trainer import McmcConfig, train_predict

    needs_features = {"rf", "fm_feat"} & set(spec.methods)
    if needs_features and level_attributes is None:
        raise ConfigurationError(f"methods {sorted(needs_features)} need level attributes (features input)")
    if max(spec.checkpoints) > split_spec.eval_level_floor:
        raise ConfigurationError("checkpoints must not exceed the evaluation floor")
    say = progress or (lambda msg: logger.info(msg))

    report = EvaluationReport(spec, split_spec.eval_level_floor)
    test_keys: dict[int, set] = {}
    for seed in spec.seeds:
        for n in spec.checkpoints:
            split = split_players(data, replace(split_spec, observed_levels=n, seed=seed))
            keys = {(r.player_id, r.level_id) for r in split.test.records}
            if seed in test_keys and test_keys[seed] != keys:
                raise AssertionError("test set changed across checkpoints")
            test_keys[seed] = keys
            if keep_models:
                report.splits[(seed, n)] = split

            pid, lid, truth = split.horizon.arrays()
            naive = fit_naive(split.train)
            base_pred = clamp(predict_naive_batch(naive, lid))
            runs = [("naive", 0, base_pred)] if "naive" in spec.methods else []
            if keep_models:
                report.models[("naive", 0, n, seed)] = naive

            aug_schema = None
            if needs_features:
                aug_schema = build_schema(split, level_attributes, telemetry, augment=True)
            if "rf" in spec.methods:
                say(f"seed {seed} checkpoint {n}: rf")
                Xtr, ytr = build_rf_matrix(split, aug_schema, "train")
                Xh, _ = build_rf_matrix(split, aug_schema, "horizon")
                forest = fit_forest(Xtr, ytr, ForestConfig(n_estimators=spec.n_estimators, seed=seed),
                                    feature_names=aug_schema.real_feature_names)
                runs.append(("rf", 0, clamp(predict_forest(forest, Xh))))
                if keep_models:
                    report.models[("rf", 0, n, seed)] = forest
            for method in ("fm", "fm_feat"):
                if method not in spec.methods:
                    continue
                augment = method == "fm_feat"
                schema = aug_schema if augment else build_schema(split)
                train_rows = build_fm_rows(split, schema, augment, "train")
                horizon_rows = build_fm_rows(split, schema, augment, "horizon")
                for k in spec.factor_counts:
                    say(f"seed {seed} checkpoint {n}: {_label(method, k)}")
                    cfg = McmcConfig(k=k, iterations=spec.iterations, burn_in=spec.burn_in,
                                     init_stdev=spec.feat_init_stdev if augment else spec.init_stdev, seed=seed,
                                     group_by_block=spec.group_by_block)
                    res = train_predict(train_rows, horizon_rows, cfg, groups=schema.block_ids(),
                                        fingerprint=schema.fingerprint)
                    runs.append((method, k, res.prediction.clamped()))
                    if keep_models:
                        report.models[(method, k, n, seed)] = (res, schema)
            for method, k, pred in runs:
                report.dumps.append(PredictionDump(method, k, n, seed, pid, lid, truth, np.asarray(pred)))

    _assemble(report, spec)
    return report


def _assemble(report: EvaluationReport, spec: SweepSpec) -> None:
    floor = report.eval_level_floor
    labels = sorted({(d.method, d.k) for d in report.dumps}, key=lambda mk: (METHODS.index(mk[0]), mk[1]))
    for method, k in labels:
        for n in spec.checkpoints:
            dumps = [d for d in report.dumps if d.method == method and d.k == k and d.checkpoint == n]
            if not dumps:
                continue
            preds, truths, seed_mae, seed_rmse = [], [], [], []
            for d in dumps:
                m = d.level_ids > floor
                preds.append(d.pred[m])
                truths.append(d.truth[m])
                seed_mae.append(mae(d.pred[m], d.truth[m]))
                seed_rmse.append(rmse(d.pred[m], d.truth[m]))
            p, t = np.concatenate(preds), np.concatenate(truths)
            report.cells[(method, k, n)] = MetricCell(
                mae=mae(p, t), rmse=rmse(p, t),
                ci95_mae=row_interval(np.abs(p - t)), ci95_rmse=rmse_interval(p, t),
                n_test_rows=int(p.size), seed_mae=seed_mae, seed_rmse=seed_rmse,
                seed_ci95_mae=seed_interval(seed_mae), seed_ci95_rmse=seed_interval(seed_rmse),
            )
            if method == "naive":
                continue
            base = {d.seed: d for d in report.dumps if d.method == "naive" and d.checkpoint == n}
            if not base:
                continue
            lv = np.concatenate([d.level_ids for d in dumps])
            mp = np.concatenate([d.pred for d in dumps])
            bp = np.concatenate([base[d.seed].pred for d in dumps])
            tr = np.concatenate([d.truth for d in dumps])
            report.curves[(method, k, n)] = per_level_error_curve(lv, mp, bp, tr, spec.window)
