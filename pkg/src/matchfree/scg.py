"""Sparse correspondence generation.

Dense ``A`` -> row-max filter -> per-column peak ``a_max`` -> keep ``A[i, j]``
where it reaches ``rho * a_max[j]`` -> row normalisation.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class NormMode(str, enum.Enum):
    NONE = "none"
    SUM1 = "sum1"
    MAX = "max"


@dataclass(frozen=True)
class ScgConfig:
    rho: float = 0.5
    eps: float = 1e-8
    norm: NormMode = NormMode.SUM1

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        object.__setattr__(self, "norm", NormMode(self.norm))


@dataclass
class SparseCorr:
    values: np.ndarray
    mask: np.ndarray

    def row_sums(self) -> np.ndarray:
        return self.values.sum(axis=1)

    def support_counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def row_max_filter(a) -> np.ndarray:
    """Zero everything but each row's maximum (tied maxima all survive)."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[0] == 0 or a.shape[1] == 0:
        return a.copy()
    return np.where(a == a.max(axis=1, keepdims=True), a, 0.0)


def col_max(a_row) -> np.ndarray:
    a_row = np.asarray(a_row, dtype=np.float64)
    if a_row.shape[0] == 0:
        return np.zeros(a_row.shape[1])
    return a_row.max(axis=0)


def sparsify(a, a_max, cfg: ScgConfig = ScgConfig()) -> SparseCorr:
    """Keep ``A[i, j] >= rho * a_max[j]``; columns with ``a_max[j] == 0`` are dropped."""
    a = np.asarray(a, dtype=np.float64)
    a_max = np.asarray(a_max, dtype=np.float64).reshape(1, -1)
    if a_max.shape[1] != a.shape[1]:
        raise ValueError(f"a_max has {a_max.shape[1]} entries for {a.shape[1]} columns")
    mask = (a >= cfg.rho * a_max) & (a_max > 0)
    return SparseCorr(np.where(mask, a, 0.0), mask)


def normalize(s: SparseCorr, cfg: ScgConfig = ScgConfig()) -> SparseCorr:
    v = s.values
    if cfg.norm is NormMode.NONE or v.shape[0] == 0:
        return SparseCorr(v.copy(), s.mask.copy())
    if cfg.norm is NormMode.SUM1:
        denom = v.sum(axis=1, keepdims=True) + cfg.eps
    else:
        denom = v.max(axis=1, keepdims=True) + cfg.eps
    return SparseCorr(v / denom, s.mask.copy())


def normalize_backward(d_hat, s: SparseCorr, cfg: ScgConfig = ScgConfig()) -> np.ndarray:
    """Gradient w.r.t. dense ``A`` through normalisation; the mask is a constant."""
    g = np.asarray(d_hat, dtype=np.float64) * s.mask
    x = s.values
    if cfg.norm is NormMode.NONE or x.shape[0] == 0:
        return g
    if cfg.norm is NormMode.SUM1:
        denom = x.sum(axis=1, keepdims=True) + cfg.eps
        inner = np.sum(g * x, axis=1, keepdims=True) / denom**2
        return (g / denom - inner) * s.mask
    denom = x.max(axis=1, keepdims=True) + cfg.eps
    inner = np.sum(g * x, axis=1, keepdims=True) / denom**2
    out = g / denom
    rows = np.arange(x.shape[0])
    out[rows, x.argmax(axis=1)] -= inner[:, 0]
    return out * s.mask


@dataclass
class ScgTrace:
    a_row: np.ndarray
    a_max: np.ndarray
    tau: np.ndarray
    sparse: SparseCorr  # before normalisation
    hat: SparseCorr


def generate(a, cfg: ScgConfig = ScgConfig()) -> ScgTrace:
    a = np.asarray(a, dtype=np.float64)
    a_row = row_max_filter(a)
    a_max = col_max(a_row)
    sparse = sparsify(a, a_max, cfg)
    return ScgTrace(a_row, a_max, cfg.rho * a_max, sparse, normalize(sparse, cfg))


def decision_margin(a, cfg: ScgConfig = ScgConfig()) -> float:
    """Distance of ``A`` from the nearest point where the sparsity mask flips.

    Covers the row-max gap (0 under ties) and ``|A[i, j] - tau[j]|``. ``A_hat``
    is discontinuous where this is 0, so finite differences are meaningless
    within a step of that size.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        return math.inf
    out = math.inf
    if a.shape[1] > 1:
        top = np.sort(a, axis=1)[:, -2:]
        out = float(np.min(top[:, 1] - top[:, 0]))
    a_max = col_max(row_max_filter(a))
    live = a_max > 0
    if live.any():
        out = min(out, float(np.min(np.abs(a[:, live] - cfg.rho * a_max[live]))))
    return out


def dump_csv(path, a, trace: ScgTrace) -> None:
    """Long-format dump: ``matrix,row,col,value`` for A, a_max, tau and A_hat."""
    a = np.asarray(a, dtype=np.float64)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["matrix", "row", "col", "value"])
        for name, mat in (("A", a), ("A_hat", trace.hat.values)):
            for (i, j), v in np.ndenumerate(mat):
                w.writerow([name, i, j, repr(float(v))])
        for name, vec in (("a_max", trace.a_max), ("tau", trace.tau)):
            for j, v in enumerate(vec):
                w.writerow([name, 0, j, repr(float(v))])
