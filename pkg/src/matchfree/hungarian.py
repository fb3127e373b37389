"""One-to-one assignment baseline: Hungarian matching and an exhaustive oracle."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .cost import CostMatrix

BRUTE_FORCE_MAX_SIDE = 9
BRUTE_FORCE_MAX_INJECTIONS = 20_000_000


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (gt_index, query_index), sorted by gt index
    total_cost: float

    def as_dict(self) -> dict[int, int]:
        return dict(self.pairs)


def _as_cost(c) -> np.ndarray:
    c = c.values if isinstance(c, CostMatrix) else np.asarray(c, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite entries")
    return c


def _assignment(c: np.ndarray, pairs) -> Assignment:
    pairs = sorted((int(i), int(j)) for i, j in pairs)
    return Assignment(pairs, math.fsum(c[i, j] for i, j in pairs))


def _shortest_augmenting_path(cost: np.ndarray) -> np.ndarray:
    """Rows-to-columns assignment for an n x m matrix with n <= m.

    Classical potentials + Dijkstra formulation, one augmentation per row,
    O(n^2 m) overall; the column scan is vectorised. Ties go to the lowest
    column index. Returns ``col_of_row``.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j]: 1-based row on column j, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    inf = np.inf
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            col_of_row[owner[j] - 1] = j - 1
    return col_of_row


def hungarian_match(c, pad_square: bool = True) -> Assignment:
    """Minimum-cost one-to-one assignment of ``min(M, N)`` pairs.

    With ``pad_square`` the M x N matrix is zero-padded to a square one before
    solving, the textbook O(max(M, N)^3) setting. ``pad_square=False`` solves
    the rectangular problem directly (O(min^2 * max)).
    """
    c = _as_cost(c)
    m, n = c.shape
    if m == 0 or n == 0:
        return Assignment([], 0.0)
    if pad_square:
        s = max(m, n)
        work = np.zeros((s, s))
        work[:m, :n] = c
        cols = _shortest_augmenting_path(work)
        pairs = [(i, int(cols[i])) for i in range(m) if cols[i] < n]
    elif m <= n:
        cols = _shortest_augmenting_path(c)
        pairs = [(i, int(cols[i])) for i in range(m)]
    else:
        rows = _shortest_augmenting_path(c.T)
        pairs = [(int(rows[j]), j) for j in range(n)]
    return _assignment(c, pairs)


def brute_force_match(c) -> Assignment:
    """Exhaustive minimum over all injections of the smaller side into the larger."""
    c = _as_cost(c)
    m, n = c.shape
    if min(m, n) > BRUTE_FORCE_MAX_SIDE:
        raise ValueError(f"brute force limited to min(M, N) <= {BRUTE_FORCE_MAX_SIDE}")
    if m == 0 or n == 0:
        return Assignment([], 0.0)
    transposed = m > n
    work = c.T if transposed else c
    rows, cols = work.shape
    count = math.perm(cols, rows)
    if count > BRUTE_FORCE_MAX_INJECTIONS:
        raise ValueError(f"{count} injections exceed the brute-force cap")
    perms = np.array(list(itertools.permutations(range(cols), rows)), dtype=np.int64)
    sums = work[np.arange(rows), perms].sum(axis=1)
    # re-rank near-minimal candidates with an exactly rounded sum
    lo = sums.min()
    near = np.flatnonzero(sums <= lo + 1e-9 * max(1.0, abs(lo)))
    exact = [math.fsum(work[np.arange(rows), perms[k]]) for k in near]
    best = perms[near[int(np.argmin(exact))]]
    if transposed:
        pairs = [(int(best[j]), j) for j in range(rows)]
    else:
        pairs = [(i, int(best[i])) for i in range(rows)]
    return _assignment(c, pairs)
