"""Bayesian FM training by Gibbs sampling (MCMC).

Each sweep draws, in order: the noise precision, the per-group Normal-Gamma
hyperparameters, every ``w_i`` in ascending column order, then every
``v_{i,f}`` column-major by factor. Parameters are drawn from their exact
Gaussian conditionals; the per-row residual ``e = y_hat - y`` and factor sums
``q`` are updated in place so one sweep costs O(nnz * k).
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np
import scipy.sparse as sp

from .dataset import ProtocolError
from .features import DesignMatrix
from .fm import FmModel, clamp, predict_batch

logger = logging.getLogger(__name__)

FACTOR_COUNTS = (1, 2, 4, 8, 16, 32)


class NumericalDivergenceError(FloatingPointError):
    def __init__(self, iteration: int, parameter: str):
        super().__init__(f"non-finite value at iteration {iteration} while sampling {parameter}")
        self.iteration = iteration
        self.parameter = parameter


@dataclass(frozen=True)
class McmcConfig:
    k: int = 2
    iterations: int = 1000
    burn_in: int = 50
    init_stdev: float = 1.0
    seed: int = 0
    # hold the noise precision fixed instead of sampling it
    fixed_alpha: float | None = None
    # separate (mu, lambda) per schema block instead of one group for all columns
    group_by_block: bool = False
    # Gamma(alpha_0/2, beta_0/2) on alpha and every lambda; Normal(mu_0, 1/(gamma_0 lambda)) on mu
    alpha_0: float = 1.0
    beta_0: float = 1.0
    gamma_0: float = 1.0
    mu_0: float = 0.0

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn_in must satisfy 0 <= burn_in < iterations")
        if self.init_stdev <= 0:
            raise ValueError("init_stdev must be positive")
        if self.fixed_alpha is not None and self.fixed_alpha <= 0:
            raise ValueError("fixed_alpha must be positive")


@dataclass
class HyperState:
    alpha: float
    mu_w: np.ndarray
    lam_w: np.ndarray
    mu_v: np.ndarray   # (k, groups)
    lam_v: np.ndarray  # (k, groups)

    @classmethod
    def initial(cls, k: int, n_groups: int = 1, alpha: float = 1.0) -> "HyperState":
        return cls(alpha, np.zeros(n_groups), np.ones(n_groups), np.zeros((k, n_groups)), np.ones((k, n_groups)))

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "mu_w": self.mu_w.tolist(), "lam_w": self.lam_w.tolist(),
                "mu_v": self.mu_v.tolist(), "lam_v": self.lam_v.tolist()}


def init_model(schema_width: int, config: McmcConfig, rng: np.random.Generator | None = None,
               fingerprint: str = "") -> FmModel:
    """``w = 0`` and ``V ~ N(0, init_stdev^2)`` from the seeded generator."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    V = rng.normal(0.0, config.init_stdev, size=(schema_width, config.k))
    return FmModel(np.zeros(schema_width), V, fingerprint=fingerprint)


class SweepCache:
    """Column-major view of the training design plus the incremental caches."""

    def __init__(self, model: FmModel, design: DesignMatrix, groups: np.ndarray | None = None):
        if design.width != model.schema_width:
            raise ValueError(f"design width {design.width} != model width {model.schema_width}")
        Xc = sp.csc_matrix(design.X)
        Xc.sort_indices()
        self.X = design.X
        self.indptr = Xc.indptr.astype(np.int64)
        self.rows = Xc.indices.astype(np.int64)
        self.data = Xc.data.astype(np.float64)
        self.y = np.asarray(design.y, dtype=np.float64)
        if groups is None:
            groups = np.zeros(model.schema_width, dtype=np.int64)
        _, self.groups = np.unique(np.asarray(groups), return_inverse=True)
        self.groups = self.groups.astype(np.int64)
        self.n_groups = int(self.groups.max()) + 1 if self.groups.size else 1
        self.refresh(model)

    def refresh(self, model: FmModel) -> None:
        self.q = np.ascontiguousarray(np.asarray(self.X @ model.V).reshape(len(self.y), model.k))
        self.e = predict_batch(model, self.X) - self.y

    def recomputed_residuals(self, model: FmModel) -> np.ndarray:
        return predict_batch(model, self.X) - self.y


@numba.njit(cache=True)
def _sample_parameters(indptr, rows, data, e, q, w, V, group, mu_w, lam_w, mu_v, lam_v, alpha, z):
    p = w.shape[0]
    k = V.shape[1]
    for i in range(p):
        lo = indptr[i]
        hi = indptr[i + 1]
        theta = w[i]
        s_hh = 0.0
        s_hr = 0.0
        for j in range(lo, hi):
            h = data[j]
            s_hh += h * h
            s_hr += h * (h * theta - e[rows[j]])
        g = group[i]
        var = 1.0 / (alpha * s_hh + lam_w[g])
        mean = var * (alpha * s_hr + lam_w[g] * mu_w[g])
        new = mean + math.sqrt(var) * z[0, i]
        if not math.isfinite(new):
            return i
        d = new - theta
        for j in range(lo, hi):
            e[rows[j]] += data[j] * d
        w[i] = new
    for f in range(k):
        for i in range(p):
            lo = indptr[i]
            hi = indptr[i + 1]
            theta = V[i, f]
            s_hh = 0.0
            s_hr = 0.0
            for j in range(lo, hi):
                x = data[j]
                r = rows[j]
                h = x * (q[r, f] - theta * x)
                s_hh += h * h
                s_hr += h * (h * theta - e[r])
            g = group[i]
            var = 1.0 / (alpha * s_hh + lam_v[f, g])
            mean = var * (alpha * s_hr + lam_v[f, g] * mu_v[f, g])
            new = mean + math.sqrt(var) * z[f + 1, i]
            if not math.isfinite(new):
                return p * (f + 1) + i
            d = new - theta
            if d != 0.0:
                for j in range(lo, hi):
                    x = data[j]
                    r = rows[j]
                    e[r] += x * (q[r, f] - theta * x) * d
                    q[r, f] += x * d
            V[i, f] = new
    return -1


def _sample_group_hyper(theta, group, n_groups, mu, lam, rng, config: McmcConfig):
    m = np.bincount(group, minlength=n_groups).astype(float)
    s = np.bincount(group, weights=theta, minlength=n_groups)
    prec = m + config.gamma_0
    mu_new = (s + config.gamma_0 * config.mu_0) / prec + rng.standard_normal(n_groups) / np.sqrt(prec * lam)
    ss = np.bincount(group, weights=(theta - mu_new[group]) ** 2, minlength=n_groups)
    shape = (config.alpha_0 + m + 1.0) / 2.0
    rate = (config.beta_0 + ss + config.gamma_0 * (mu_new - config.mu_0) ** 2) / 2.0
    lam_new = rng.gamma(shape, 1.0 / rate)
    return mu_new, lam_new


def gibbs_sweep(model: FmModel, cache: SweepCache, hyper: HyperState, rng: np.random.Generator,
                config: McmcConfig, iteration: int = 0) -> tuple[FmModel, HyperState]:
    """One full Gibbs sweep; mutates ``model`` and ``cache`` in place."""
    n = len(cache.y)
    sse = float(cache.e @ cache.e)
    if not math.isfinite(sse):
        raise NumericalDivergenceError(iteration, "residuals")
    if config.fixed_alpha is not None:
        alpha = float(config.fixed_alpha)
    else:
        alpha = float(rng.gamma((config.alpha_0 + n) / 2.0, 2.0 / (config.beta_0 + sse)))

    G = cache.n_groups
    mu_w, lam_w = _sample_group_hyper(model.w, cache.groups, G, hyper.mu_w, hyper.lam_w, rng, config)
    mu_v = np.empty((model.k, G))
    lam_v = np.empty((model.k, G))
    for f in range(model.k):
        mu_v[f], lam_v[f] = _sample_group_hyper(model.V[:, f], cache.groups, G, hyper.mu_v[f], hyper.lam_v[f],
                                                rng, config)
    hyper = HyperState(alpha, mu_w, lam_w, mu_v, lam_v)
    if not (np.all(np.isfinite(lam_w)) and np.all(np.isfinite(lam_v)) and math.isfinite(alpha)):
        raise NumericalDivergenceError(iteration, "hyperparameters")

    z = rng.standard_normal((model.k + 1, model.schema_width))
    bad = _sample_parameters(cache.indptr, cache.rows, cache.data, cache.e, cache.q, model.w, model.V,
                             cache.groups, mu_w, lam_w, mu_v, lam_v, alpha, z)
    if bad >= 0:
        p = model.schema_width
        name = f"w[{bad}]" if bad < p else f"V[{bad % p}, {bad // p - 1}]"
        raise NumericalDivergenceError(iteration, name)
    return model, hyper


@dataclass
class PosteriorPrediction:
    sums: np.ndarray
    draws: int = 0

    @property
    def mean(self) -> np.ndarray:
        if self.draws == 0:
            raise ValueError("no posterior draws accumulated")
        return self.sums / self.draws

    def clamped(self) -> np.ndarray:
        return clamp(self.mean)


@dataclass
class TrainResult:
    model: FmModel        # posterior mean of the parameters over kept draws
    last_draw: FmModel
    prediction: PosteriorPrediction
    hyper: HyperState
    log: list[dict] = field(default_factory=list)

    def write_log(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["iteration", "train_rmse", "alpha", "wall_ms"],
                               lineterminator="\n")
            w.writeheader()
            w.writerows(self.log)


def train_predict(train: DesignMatrix, test: DesignMatrix | None, config: McmcConfig,
                  groups: Sequence[int] | None = None, fingerprint: str = "") -> TrainResult:
    """Run the sampler and average test predictions over post-burn-in draws.

    ``groups`` assigns each column to a hyperparameter group; it is only
    consulted when ``config.group_by_block`` is set.
    """
    if len(train) == 0:
        raise ProtocolError("empty training set")
    if test is not None and test.width != train.width:
        raise ValueError("train and test rows come from different schemas")
    rng = np.random.default_rng(config.seed)
    model = init_model(train.width, config, rng, fingerprint)
    use_groups = np.asarray(groups) if (config.group_by_block and groups is not None) else None
    cache = SweepCache(model, train, use_groups)
    hyper = HyperState.initial(model.k, cache.n_groups,
                               config.fixed_alpha if config.fixed_alpha is not None else 1.0)

    n_test = 0 if test is None else len(test)
    pred = PosteriorPrediction(np.zeros(n_test))
    w_sum = np.zeros_like(model.w)
    V_sum = np.zeros_like(model.V)
    log = []
    t0 = time.perf_counter()
    for it in range(config.iterations):
        model, hyper = gibbs_sweep(model, cache, hyper, rng, config, it)
        log.append({
            "iteration": it + 1,
            "train_rmse": float(np.sqrt(np.mean(cache.e ** 2))),
            "alpha": hyper.alpha,
            "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
        })
        if it >= config.burn_in:
            if n_test:
                pred.sums += predict_batch(model, test.X)
            pred.draws += 1
            w_sum += model.w
            V_sum += model.V
    logger.debug("trained k=%d for %d iterations in %.1fs", model.k, config.iterations, time.perf_counter() - t0)
    mean_model = FmModel(w_sum / pred.draws, V_sum / pred.draws, fingerprint=fingerprint)
    return TrainResult(mean_model, model, pred, hyper, log)
