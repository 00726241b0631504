"""Reading a trained FM: per-entity parameter tables, histograms, rank correlations."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .dataset import Dataset
from .features import FeatureSchema
from .fm import FmModel, SchemaMismatchError


class UndefinedCorrelationError(ValueError):
    pass


def rank_average(a) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    a = np.asarray(a, dtype=float)
    order = np.argsort(a, kind="mergesort")
    s = a[order]
    starts = np.r_[0, np.nonzero(np.diff(s))[0] + 1]
    ends = np.r_[starts[1:], s.size]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(a.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def spearman(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be 1-D and of equal length")
    if a.size < 2:
        raise ValueError("need at least 2 observations")
    ra, rb = rank_average(a), rank_average(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra @ ra) * (rb @ rb))
    if denom == 0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    return float(np.clip((ra @ rb) / denom, -1.0, 1.0))


@dataclass
class FactorTable:
    kind: str                      # "player" or "level"
    ids: list
    w: np.ndarray
    V: np.ndarray
    stats: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self):
        return len(self.ids)

    def column(self, name: str) -> np.ndarray:
        if name == "w":
            return self.w
        if name.startswith("v") and name[1:].isdigit():
            return self.V[:, int(name[1:]) - 1]
        return self.stats[name]

    def write_csv(self, path: str | Path) -> None:
        stat_names = list(self.stats)
        with Path(path).open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["id", "w"] + [f"v{f + 1}" for f in range(self.V.shape[1])] + stat_names)
            for i, ident in enumerate(self.ids):
                wr.writerow([ident, repr(float(self.w[i]))] + [repr(float(x)) for x in self.V[i]]
                            + [_cell(self.stats[s][i]) for s in stat_names])


def _cell(x) -> str:
    x = float(x)
    return "" if np.isnan(x) else repr(x)


def canonicalize_signs(model: FmModel, schema: FeatureSchema, level_avg_attempts: np.ndarray) -> FmModel:
    """Flip whole factor columns so level-side factors rank-correlate non-negatively
    with average level attempts. Predictions are unchanged by the flip."""
    out = model.copy()
    lo, hi = schema.n_players, schema.n_players + schema.n_levels
    ok = ~np.isnan(level_avg_attempts)
    for f in range(out.k):
        try:
            rho = spearman(out.V[lo:hi, f][ok], level_avg_attempts[ok])
        except (UndefinedCorrelationError, ValueError):
            continue
        if rho < 0:
            out.V[:, f] *= -1.0
    return out


def center_factors(model: FmModel, schema: FeatureSchema) -> FmModel:
    """Move the population mean of each side's factors into the other side's ``w``.

    With one-hot rows (exactly one player and one level active, no feature
    columns), ``<v_u, v_l>`` with ``v_u = a_u + m`` and ``v_l = b_l + n`` splits
    into ``<a_u, b_l> + <a_u, n> + <m, b_l> + <m, n>``. The last three terms are
    main effects, so folding them into ``w_u``, ``w_l`` and ``w0`` leaves every
    prediction unchanged while the level main effect stops hiding in the factors.
    Models over schemas with feature columns are returned unchanged.
    """
    out = model.copy()
    P, L = schema.n_players, schema.n_levels
    if out.k == 0 or schema.width != P + L:
        return out
    m = out.V[:P].mean(axis=0)
    n = out.V[P:].mean(axis=0)
    a = out.V[:P] - m
    b = out.V[P:] - n
    out.w[:P] += a @ n
    out.w[P:] += b @ m
    out.w0 += float(m @ n)
    out.V[:P], out.V[P:] = a, b
    return out


def build_factor_tables(model: FmModel, schema: FeatureSchema, train: Dataset,
                        canonicalize: bool = True) -> tuple[FactorTable, FactorTable]:
    """Split parameters into player and level tables joined with training attempt statistics.

    ``canonicalize`` applies :func:`center_factors` then :func:`canonicalize_signs`;
    both leave predictions unchanged. Level tables carry two normalized variances: ``variance / mean`` and
    ``variance / mean**2``.
    """
    if model.schema_width != schema.width:
        raise SchemaMismatchError(schema.fingerprint, model.fingerprint or f"width {model.schema_width}")
    if model.fingerprint and model.fingerprint != schema.fingerprint:
        raise SchemaMismatchError(schema.fingerprint, model.fingerprint)
    pid, lid, att = train.arrays()
    P, L = schema.n_players, schema.n_levels
    lmean, lvar = _exact_stats(list(schema.levels), lid, att)
    pmean, pvar = _exact_stats(list(schema.players), pid, att)
    if canonicalize:
        model = canonicalize_signs(center_factors(model, schema), schema, lmean)
    with np.errstate(invalid="ignore", divide="ignore"):
        levels = FactorTable("level", list(schema.levels), model.w[P:P + L].copy(), model.V[P:P + L].copy(), {
            "avg_attempts": lmean,
            "attempts_variance": lvar,
            "normalized_variance": lvar / lmean,
            "normalized_variance_sq": lvar / lmean ** 2,
            "level_number": np.asarray(schema.levels, dtype=float),
        })
    players = FactorTable("player", list(schema.players), model.w[:P].copy(), model.V[:P].copy(), {
        "mean_attempts": pmean,
        "attempts_variance": pvar,
    })
    return players, levels


def _exact_stats(ids, keys, att) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population variance of attempts per id (NaN when the id has no rows)."""
    groups: dict = {}
    for k, a in zip(keys, att):
        groups.setdefault(k, []).append(a)
    mean = np.full(len(ids), np.nan)
    var = np.full(len(ids), np.nan)
    for i, ident in enumerate(ids):
        g = groups.get(ident)
        if g:
            arr = np.asarray(g, dtype=float)
            mean[i] = arr.mean()
            var[i] = arr.var()
    return mean, var


def skill_proxy(players: FactorTable, levels: FactorTable) -> np.ndarray:
    """Higher is better: minus the player's predicted attempts averaged over every level.

    The level-side terms are shared by all players, so this reduces to
    ``-(w_u + v_u . mean(v_level))`` up to a constant.
    """
    return -(players.w + players.V @ levels.V.mean(axis=0))


def histogram(values, bins="fd") -> tuple[np.ndarray, np.ndarray]:
    """Counts and edges with Freedman-Diaconis bin width over the full value range."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    counts, edges = np.histogram(v, bins=bins)
    return counts, edges


def param_histograms(players: FactorTable, levels: FactorTable, bins="fd") -> list[dict]:
    rows = []
    names = ["w"] + [f"v{f + 1}" for f in range(players.V.shape[1])]
    for table in (players, levels):
        for name in names:
            counts, edges = histogram(table.column(name), bins)
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                rows.append({"entity": table.kind, "param": name, "bin_lo": float(lo), "bin_hi": float(hi),
                             "count": int(c)})
    return rows


@dataclass
class CorrelationReport:
    pairs: dict[str, tuple[float, int]] = field(default_factory=dict)

    def __getitem__(self, name: str) -> float:
        return self.pairs[name][0]

    def __contains__(self, name: str) -> bool:
        return name in self.pairs

    def add(self, name: str, a, b) -> None:
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        ok = np.isfinite(a) & np.isfinite(b)
        self.pairs[name] = (spearman(a[ok], b[ok]), int(ok.sum()))

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pair", "spearman_rho", "n"])
            for name, (rho, n) in self.pairs.items():
                w.writerow([name, repr(rho), n])


def interpretation_report(players: FactorTable, levels: FactorTable,
                          true_skill: Mapping[str, float] | None = None,
                          true_difficulty: Mapping[int, float] | None = None) -> CorrelationReport:
    rep = CorrelationReport()
    rep.add("level_w~level_avg_attempts", levels.w, levels.stats["avg_attempts"])
    rep.add("player_w~player_mean_attempts", players.w, players.stats["mean_attempts"])
    if levels.V.shape[1] >= 1:
        rep.add("level_v1~level_avg_attempts", levels.column("v1"), levels.stats["avg_attempts"])
        rep.add("level_v1~level_normalized_variance", levels.column("v1"), levels.stats["normalized_variance"])
        rep.add("level_v1~level_normalized_variance_sq", levels.column("v1"),
                levels.stats["normalized_variance_sq"])
        rep.add("player_v1~player_mean_attempts", players.column("v1"), players.stats["mean_attempts"])
        rep.add("player_v1~player_attempts_variance", players.column("v1"), players.stats["attempts_variance"])
    if levels.V.shape[1] >= 2:
        rep.add("level_v2~level_number", levels.column("v2"), levels.stats["level_number"])
    if true_difficulty is not None:
        d = np.array([true_difficulty.get(lv, np.nan) for lv in levels.ids])
        rep.add("level_w~true_difficulty", levels.w, d)
    if true_skill is not None:
        s = np.array([true_skill.get(p, np.nan) for p in players.ids])
        rep.add("player_w~true_skill", players.w, s)
        if players.V.shape[1] >= 1:
            rep.add("player_v1~true_skill", players.column("v1"), s)
        rep.add("player_skill_proxy~true_skill", skill_proxy(players, levels), s)
    return rep


def write_analysis(out_dir: str | Path, players: FactorTable, levels: FactorTable,
                   report: CorrelationReport) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "factors_levels.csv", out / "factors_players.csv", out / "param_histograms.csv",
             out / "correlations.csv"]
    levels.write_csv(paths[0])
    players.write_csv(paths[1])
    with paths[2].open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["entity", "param", "bin_lo", "bin_hi", "count"], lineterminator="\n")
        w.writeheader()
        for row in param_histograms(players, levels):
            w.writerow({**row, "bin_lo": repr(row["bin_lo"]), "bin_hi": repr(row["bin_hi"])})
    report.write_csv(paths[3])
    return paths
