"""Comparison predictors: per-level average attempts and a random forest regressor."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.tree import DecisionTreeRegressor

from .dataset import Dataset

MAX_SEED = np.iinfo(np.int32).max


@dataclass
class NaiveBaselineModel:
    """``y_hat = w0 + w_level``: mean training attempts on the level, whoever plays it."""

    level_means: dict[int, float]
    fallback: float
    w0: float = 0.0


def fit_naive(train: Dataset) -> NaiveBaselineModel:
    if len(train) == 0:
        raise ValueError("cannot fit the naive baseline on an empty dataset")
    _, lid, att = train.arrays()
    levels, inv = np.unique(lid, return_inverse=True)
    means = np.bincount(inv, weights=att) / np.bincount(inv)
    return NaiveBaselineModel({int(lv): float(m) for lv, m in zip(levels, means)}, float(att.mean()))


def predict_naive(model: NaiveBaselineModel, level_id: int, player_id: str | None = None) -> float:
    # player_id is accepted for interface symmetry and ignored
    return model.w0 + model.level_means.get(int(level_id), model.fallback)


def predict_naive_batch(model: NaiveBaselineModel, level_ids: Sequence[int]) -> np.ndarray:
    return np.array([predict_naive(model, lv) for lv in level_ids], dtype=float)


@dataclass
class RegressionTree:
    """Array-encoded binary tree; ``feature[i] == -1`` marks a leaf.

    ``value`` holds the mean target of the node's (bootstrap-weighted)
    samples and ``n_samples`` the count of distinct training rows reaching it.
    ``impurity_decrease`` is the weighted squared-error reduction of a split.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    impurity_decrease: np.ndarray
    n_features: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    def apply(self, X: np.ndarray) -> np.ndarray:
        # thresholds are midpoints of float32 feature values
        X = np.asarray(X, dtype=np.float32)
        node = np.zeros(len(X), dtype=np.int64)
        active = ~self.is_leaf[node]
        while np.any(active):
            idx = np.nonzero(active)[0]
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active[idx] = ~self.is_leaf[node[idx]]
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def feature_importances(self) -> np.ndarray:
        """Impurity decrease per feature, normalized to sum 1 (zeros if no split)."""
        imp = np.bincount(self.feature[~self.is_leaf], weights=self.impurity_decrease[~self.is_leaf],
                          minlength=self.n_features)
        total = imp.sum()
        return imp / total if total > 0 else imp

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionTree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=float),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=float),
            n_samples=np.asarray(d["n_samples"], dtype=np.int64),
            impurity_decrease=np.asarray(d["impurity_decrease"], dtype=float),
            n_features=int(d["n_features"]),
        )

    @classmethod
    def from_sklearn(cls, est: DecisionTreeRegressor, n_features: int) -> "RegressionTree":
        t = est.tree_
        left, right = t.children_left.astype(np.int64), t.children_right.astype(np.int64)
        leaf = left < 0
        w = t.weighted_n_node_samples
        dec = np.zeros(t.node_count)
        inner = ~leaf
        dec[inner] = (w[inner] * t.impurity[inner]
                      - w[left[inner]] * t.impurity[left[inner]]
                      - w[right[inner]] * t.impurity[right[inner]])
        return cls(
            feature=np.where(leaf, -1, t.feature).astype(np.int64),
            threshold=np.where(leaf, np.nan, t.threshold).astype(float),
            left=left,
            right=right,
            value=t.value[:, 0, 0].astype(float),
            n_samples=t.n_node_samples.astype(np.int64),
            impurity_decrease=np.maximum(dec, 0.0),
            n_features=n_features,
        )


@dataclass(frozen=True)
class ForestConfig:
    n_estimators: int = 150
    max_depth: int | None = None
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    max_features: int | None = None  # None: every feature at every split
    bootstrap: bool = True
    seed: int = 0


@dataclass
class RandomForestModel:
    trees: list[RegressionTree]
    config: ForestConfig
    feature_importances: np.ndarray
    importance_std: np.ndarray
    feature_names: list[str] = field(default_factory=list)
    bootstrap_counts: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def n_features(self) -> int:
        return len(self.feature_importances)

    def oob_indices(self, tree: int) -> np.ndarray:
        return np.nonzero(self.bootstrap_counts[tree] == 0)[0]

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "feature_names": list(self.feature_names),
            "feature_importances": self.feature_importances.tolist(),
            "importance_std": self.importance_std.tolist(),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RandomForestModel":
        return cls(
            trees=[RegressionTree.from_dict(t) for t in d["trees"]],
            config=ForestConfig(**d["config"]),
            feature_importances=np.asarray(d["feature_importances"], dtype=float),
            importance_std=np.asarray(d["importance_std"], dtype=float),
            feature_names=list(d.get("feature_names", [])),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RandomForestModel":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write_importances(self, path: str | Path) -> None:
        names = self.feature_names or [f"x{i}" for i in range(self.n_features)]
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "mean_importance", "std_importance"])
            for n, m, s in zip(names, self.feature_importances, self.importance_std):
                w.writerow([n, repr(float(m)), repr(float(s))])


def fit_forest(X, y, config: ForestConfig = ForestConfig(),
               feature_names: Sequence[str] | None = None) -> RandomForestModel:
    """Bagged squared-error regression trees with mean-decrease-in-impurity importances.

    Each tree sees a bootstrap sample of the rows, drawn with replacement from
    a per-forest seeded generator; tree-level seeds are derived from the same
    generator so the fit is reproducible.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be 2-D with one row per target")
    if len(y) < 2:
        raise ValueError("need at least 2 samples")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("features and targets must be finite")
    n, d = X.shape
    rng = np.random.default_rng(config.seed)
    trees, counts = [], []
    for _ in range(config.n_estimators):
        tree_seed = int(rng.integers(MAX_SEED))
        if config.bootstrap:
            c = np.bincount(rng.integers(0, n, n), minlength=n)
        else:
            c = np.ones(n, dtype=np.int64)
        keep = c > 0
        est = DecisionTreeRegressor(
            criterion="squared_error",
            max_depth=config.max_depth,
            min_samples_split=config.min_samples_split,
            min_samples_leaf=config.min_samples_leaf,
            max_features=config.max_features,
            random_state=tree_seed,
        )
        est.fit(X[keep], y[keep], sample_weight=c[keep].astype(float))
        trees.append(RegressionTree.from_sklearn(est, d))
        counts.append(c)
    per_tree = np.array([t.feature_importances() for t in trees])
    mean = per_tree.mean(axis=0)
    total = mean.sum()
    if total > 0:
        mean = mean / total
    return RandomForestModel(trees, config, mean, per_tree.std(axis=0),
                             list(feature_names) if feature_names is not None else [], counts)


def predict_forest(model: RandomForestModel, X) -> np.ndarray | float:
    """Mean of the trees' leaf values; accepts one row or a matrix."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X2 = X[None, :] if single else X
    if X2.shape[1] != model.n_features:
        raise ValueError(f"row width {X2.shape[1]} != training width {model.n_features}")
    pred = np.mean([t.predict(X2) for t in model.trees], axis=0)
    return float(pred[0]) if single else pred
