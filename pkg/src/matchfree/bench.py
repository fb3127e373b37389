"""Latency harness: Hungarian assignment versus the match-free correspondence step.

Every cell builds one seeded scene, computes its cost matrix once and times
each path on that same input. Timing is single threaded (BLAS pools are
limited to one thread) and reported as median and interquartile range over
repetitions, after warmup.
"""

from __future__ import annotations

import csv
import math
import os
import platform
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from . import gtprobe
from .cost import GroundTruthSet, PredictionSet, broadcast_cost
from .hungarian import hungarian_match
from .losses import LossConfig, total_loss_forward_backward
from .numkernel import GradTape

HUNGARIAN = "hungarian"
HUNGARIAN_RECT = "hungarian_rect"
MATCHFREE_FWD = "matchfree_fwd"
MATCHFREE_FWDBWD = "matchfree_fwdbwd"
METHODS = (HUNGARIAN, HUNGARIAN_RECT, MATCHFREE_FWD, MATCHFREE_FWDBWD)
CSV_FIELDS = ["method", "M", "N", "median_ms", "iqr_ms", "reps"]


@dataclass(frozen=True)
class BenchSpec:
    grid: tuple[tuple[int, int], ...] = ((20, 100), (20, 300), (20, 900))
    reps: int = 9
    warmup: int = 1
    methods: tuple[str, ...] = METHODS
    num_classes: int = 80
    probe_dim: int = 256
    probe_depth: int = 2
    seed: int = 0
    # each timed sample runs the kernel enough times to last at least this long
    min_sample_s: float = 2e-3

    def __post_init__(self):
        if self.reps < 5:
            raise ValueError(f"reps must be >= 5, got {self.reps}")
        if self.warmup < 1:
            raise ValueError(f"warmup must be >= 1, got {self.warmup}")
        grid = tuple((int(m), int(n)) for m, n in self.grid)
        if any(m < 0 or n < 1 for m, n in grid):
            raise ValueError("grid cells need M >= 0 and N >= 1")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "methods", tuple(self.methods))
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown bench methods {sorted(unknown)}")


@dataclass
class CellResult:
    method: str
    m: int
    n: int
    median_ms: float
    iqr_ms: float
    reps: int
    inner: int = 1


@dataclass
class BenchResult:
    cells: list[CellResult] = field(default_factory=list)
    env: dict = field(default_factory=dict)

    def get(self, method: str, m: int, n: int) -> CellResult | None:
        for c in self.cells:
            if (c.method, c.m, c.n) == (method, m, n):
                return c
        return None


def environment() -> dict:
    return {
        "cores": os.cpu_count(),
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
    }


def random_instance(m: int, n: int, num_classes: int, seed: int):
    """Seeded (GroundTruthSet, PredictionSet) with valid in-image boxes."""
    rng = np.random.default_rng(seed)

    def boxes(k):
        wh = rng.uniform(0.05, 0.4, size=(k, 2))
        c = rng.uniform(wh / 2, 1 - wh / 2)
        return np.concatenate([c, wh], axis=1)

    gts = GroundTruthSet(rng.integers(0, num_classes, size=m), boxes(m))
    preds = PredictionSet(rng.normal(size=(n, num_classes)), boxes(n))
    return gts, preds


def _time(fn: Callable[[], object], reps: int, warmup: int, min_sample_s: float):
    for _ in range(warmup):
        fn()
    t0 = time.perf_counter()
    fn()
    once = time.perf_counter() - t0
    inner = max(1, math.ceil(min_sample_s / max(once, 1e-9))) if once < min_sample_s else 1
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        samples.append((time.perf_counter() - t0) / inner)
    q1, med, q3 = np.percentile(samples, [25, 50, 75])
    return float(med) * 1e3, float(q3 - q1) * 1e3, inner


def cell_kernels(m: int, n: int, spec: BenchSpec) -> dict[str, Callable[[], object]]:
    """The timed closures for one cell, all built on the same cost matrix."""
    gts, preds = random_instance(m, n, spec.num_classes, spec.seed + 7919 * m + n)
    cfg = LossConfig()
    c = broadcast_cost(gts, preds, cfg.cost, cfg.cls_mode)
    probe = gtprobe.GtProbeParams.init(spec.num_classes, spec.probe_dim, spec.probe_depth, seed=spec.seed)
    tape = GradTape(probe.named_arrays())
    # the match-free paths rebuild C from the same inputs; check it is the same matrix
    out = total_loss_forward_backward(gts, preds, probe, cfg, backward=False)
    if out.cost.digest() != c.digest():
        raise RuntimeError("match-free path saw a different cost matrix")

    def fwdbwd():
        tape.zero()
        return total_loss_forward_backward(gts, preds, probe, cfg, tape)

    kernels = {
        MATCHFREE_FWD: lambda: total_loss_forward_backward(gts, preds, probe, cfg, backward=False),
        MATCHFREE_FWDBWD: fwdbwd,
    }
    if m > 0:
        kernels[HUNGARIAN] = lambda: hungarian_match(c, pad_square=True)
        kernels[HUNGARIAN_RECT] = lambda: hungarian_match(c, pad_square=False)
    return kernels


def run_bench(spec: BenchSpec = BenchSpec(), progress: Callable[[CellResult], None] | None = None) -> BenchResult:
    """Time every requested method on every grid cell; Hungarian is skipped when M = 0."""
    result = BenchResult(env=environment())
    with threadpool_limits(limits=1):
        for m, n in spec.grid:
            kernels = cell_kernels(m, n, spec)
            for method in spec.methods:
                if method not in kernels:
                    continue
                med, iqr, inner = _time(kernels[method], spec.reps, spec.warmup, spec.min_sample_s)
                cell = CellResult(method, m, n, med, iqr, spec.reps, inner)
                result.cells.append(cell)
                if progress is not None:
                    progress(cell)
    return result


def speedups(r: BenchResult) -> list[tuple[int, int, str, float]]:
    """(M, N, match-free method, hungarian_median / matchfree_median) per cell."""
    out = []
    for h in (c for c in r.cells if c.method == HUNGARIAN):
        for method in (MATCHFREE_FWD, MATCHFREE_FWDBWD):
            mf = r.get(method, h.m, h.n)
            if mf is not None:
                out.append((h.m, h.n, method, h.median_ms / mf.median_ms))
    return out


def growth(r: BenchResult, method: str, m: int, n_lo: int, n_hi: int) -> float | None:
    lo, hi = r.get(method, m, n_lo), r.get(method, m, n_hi)
    if lo is None or hi is None:
        return None
    return hi.median_ms / lo.median_ms


def summary(r: BenchResult) -> str:
    lines = [f"# environment: {r.env}"]
    for m, n, method, s in speedups(r):
        lines.append(f"M={m} N={n}: speedup hungarian/{method} = {s:.2f}x")
    for m in sorted({c.m for c in r.cells}):
        ns = sorted({c.n for c in r.cells if c.m == m})
        for lo, hi in zip(ns, ns[1:]):
            for method in METHODS:
                g = growth(r, method, m, lo, hi)
                if g is not None:
                    lines.append(f"M={m} {method}: t(N={hi})/t(N={lo}) = {g:.2f}")
    return "\n".join(lines) + "\n"


def emit_report(r: BenchResult, path) -> str:
    """Write the CSV to ``path`` and the ratio summary next to it; returns the summary."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for c in r.cells:
            w.writerow([c.method, c.m, c.n, repr(c.median_ms), repr(c.iqr_ms), c.reps])
    text = summary(r)
    path.with_name(path.stem + "_summary.txt").write_text(text)
    return text


def read_report(path) -> BenchResult:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    cells = [
        CellResult(r["method"], int(r["M"]), int(r["N"]), float(r["median_ms"]), float(r["iqr_ms"]), int(r["reps"]))
        for r in rows
    ]
    return BenchResult(cells)


@dataclass
class ShapeCheck:
    name: str
    passed: bool
    detail: str


def shape_checks(r: BenchResult, m: int = 20, n_lo: int = 300, n_hi: int = 900) -> list[ShapeCheck]:
    """Comparative scaling properties; checks whose cells are missing are skipped."""
    checks = []
    gh = growth(r, HUNGARIAN, m, n_lo, n_hi)
    gm = growth(r, MATCHFREE_FWDBWD, m, n_lo, n_hi)
    if gh is not None and gm is not None:
        checks.append(
            ShapeCheck(
                "hungarian growth exceeds match-free fwd+bwd growth",
                gh > gm,
                f"M={m}: hungarian t({n_hi})/t({n_lo}) = {gh:.2f}, match-free = {gm:.2f}",
            )
        )
    h, f = r.get(HUNGARIAN, m, n_hi), r.get(MATCHFREE_FWDBWD, m, n_hi)
    if h is not None and f is not None:
        checks.append(
            ShapeCheck(
                "match-free fwd+bwd faster than hungarian at the largest N",
                f.median_ms < h.median_ms,
                f"M={m} N={n_hi}: match-free {f.median_ms:.3f} ms vs hungarian {h.median_ms:.3f} ms",
            )
        )
    for mm in sorted({c.m for c in r.cells}):
        ns = sorted({c.n for c in r.cells if c.m == mm})
        for lo, hi in zip(ns, ns[1:]):
            g = growth(r, HUNGARIAN, mm, lo, hi)
            if g is not None:
                checks.append(
                    ShapeCheck(f"hungarian monotone in N (M={mm}, {lo}->{hi})", g >= 0.9, f"ratio {g:.2f}")
                )
            g = growth(r, MATCHFREE_FWDBWD, mm, lo, hi)
            if g is not None:
                # t(2N)/t(N) <= 3 generalised to any ratio: growth <= 1.5 * (hi / lo)
                bound = 1.5 * hi / lo
                checks.append(
                    ShapeCheck(
                        f"match-free fwd+bwd quasi-linear in N (M={mm}, {lo}->{hi})",
                        g <= bound,
                        f"ratio {g:.2f} <= {bound:.2f}",
                    )
                )
    return checks
