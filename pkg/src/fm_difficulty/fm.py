"""Second-order factorization machine: parameters, prediction, multilinear terms."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .dataset import MAX_ATTEMPTS
from .features import DesignRow


class SchemaMismatchError(ValueError):
    def __init__(self, expected: str, found: str):
        super().__init__(f"schema fingerprint mismatch: model has {found!r}, schema has {expected!r}")
        self.expected = expected
        self.found = found


@dataclass
class FmModel:
    """Parameters of ``y = w0 + sum_i w_i x_i + sum_{i<j} <v_i, v_j> x_i x_j``.

    ``w0`` is kept for ablations but trained models leave it at 0.
    """

    w: np.ndarray
    V: np.ndarray
    w0: float = 0.0
    fingerprint: str = ""

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.V = np.asarray(self.V, dtype=float).reshape(len(self.w), -1)
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.V))):
            raise ValueError("model parameters must be finite")

    @classmethod
    def zeros(cls, width: int, k: int, fingerprint: str = "") -> "FmModel":
        return cls(np.zeros(width), np.zeros((width, k)), fingerprint=fingerprint)

    @property
    def k(self) -> int:
        return self.V.shape[1]

    @property
    def schema_width(self) -> int:
        return len(self.w)

    def copy(self) -> "FmModel":
        return FmModel(self.w.copy(), self.V.copy(), self.w0, self.fingerprint)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "schema_width": self.schema_width,
            "w0": self.w0,
            "w": self.w.tolist(),
            "V": self.V.tolist(),
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FmModel":
        V = np.asarray(d["V"], dtype=float).reshape(int(d["schema_width"]), int(d["k"]))
        return cls(np.asarray(d["w"], dtype=float), V, float(d.get("w0", 0.0)), d.get("fingerprint", ""))


def save_model(model: FmModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()) + "\n")


def load_model(path: str | Path, expected_fingerprint: str | None = None) -> FmModel:
    model = FmModel.from_dict(json.loads(Path(path).read_text()))
    if expected_fingerprint is not None and model.fingerprint != expected_fingerprint:
        raise SchemaMismatchError(expected_fingerprint, model.fingerprint)
    return model


def _check_row(model: FmModel, x: DesignRow) -> None:
    if x.indices.size and (x.indices[-1] >= model.schema_width or x.indices[0] < 0):
        raise IndexError(f"row index out of range for schema width {model.schema_width}")


def factor_sums(model: FmModel, x: DesignRow) -> np.ndarray:
    """Per-factor accumulators ``q_f = sum_i v_{i,f} x_i``."""
    return x.values @ model.V[x.indices]


def predict(model: FmModel, x: DesignRow) -> float:
    _check_row(model, x)
    Vx = model.V[x.indices] * x.values[:, None]
    q = Vx.sum(axis=0)
    pair = 0.5 * float(np.sum(q * q) - np.sum(Vx * Vx))
    return float(model.w0 + x.values @ model.w[x.indices] + pair)


def predict_clamped(model: FmModel, x: DesignRow) -> float:
    return clamp(predict(model, x))


def clamp(pred, lo: float = 1.0, hi: float = float(MAX_ATTEMPTS)):
    """Clip predictions to the valid attempt range [1, 30]."""
    if np.isscalar(pred):
        return float(min(max(pred, lo), hi))
    return np.clip(pred, lo, hi)


def predict_batch(model: FmModel, X: sp.spmatrix) -> np.ndarray:
    """Vectorized :func:`predict` over the rows of a sparse matrix."""
    X = sp.csr_matrix(X)
    if X.shape[1] != model.schema_width:
        raise IndexError(f"design width {X.shape[1]} != schema width {model.schema_width}")
    out = model.w0 + X @ model.w
    if model.k:
        Q = X @ model.V
        X2 = X.multiply(X)
        out += 0.5 * (np.sum(Q * Q, axis=1) - np.asarray(X2 @ (model.V * model.V)).sum(axis=1))
    return np.asarray(out).ravel()


class Param(NamedTuple):
    """Handle for one trainable parameter: ``Param("w", i)`` or ``Param("v", i, f)``."""

    kind: str
    index: int
    factor: int | None = None


def get_param(model: FmModel, param: Param) -> float:
    _check_param(model, param)
    return float(model.w[param.index] if param.kind == "w" else model.V[param.index, param.factor])


def set_param(model: FmModel, param: Param, value: float) -> None:
    _check_param(model, param)
    if param.kind == "w":
        model.w[param.index] = value
    else:
        model.V[param.index, param.factor] = value


def _check_param(model: FmModel, param: Param) -> None:
    if param.kind not in ("w", "v"):
        raise ValueError(f"unknown parameter kind {param.kind!r}")
    if not 0 <= param.index < model.schema_width:
        raise ValueError(f"parameter index {param.index} out of range")
    if param.kind == "v" and (param.factor is None or not 0 <= param.factor < model.k):
        raise ValueError(f"factor {param.factor} out of range for k={model.k}")


def multilinear_terms(model: FmModel, x: DesignRow, param: Param) -> tuple[float, float]:
    """Split ``predict(x) = g + h * theta`` for the parameter ``theta``.

    For ``w_i`` the slope is ``x_i``; for ``v_{i,f}`` it is
    ``x_i * (q_f - v_{i,f} x_i)``. Both are zero when ``i`` is inactive.
    """
    theta = get_param(model, param)
    pos = np.searchsorted(x.indices, param.index)
    active = pos < x.indices.size and x.indices[pos] == param.index
    if not active:
        h = 0.0
    else:
        xi = float(x.values[pos])
        if param.kind == "w":
            h = xi
        else:
            q = float(factor_sums(model, x)[param.factor])
            h = xi * (q - theta * xi)
    return predict(model, x) - h * theta, h
