import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matchfree.cost import CostMatrix
from matchfree.hungarian import brute_force_match, hungarian_match


def perm_oracle(c):
    """Minimum over all injections, written independently of the package."""
    m, n = c.shape
    if m <= n:
        return min(math.fsum(c[i, p[i]] for i in range(m)) for p in itertools.permutations(range(n), m))
    return min(math.fsum(c[p[j], j] for j in range(n)) for p in itertools.permutations(range(m), n))


def check_assignment(a, m, n):
    gs = [i for i, _ in a.pairs]
    qs = [j for _, j in a.pairs]
    assert len(a.pairs) == min(m, n)
    assert len(set(gs)) == len(gs) and len(set(qs)) == len(qs)
    assert gs == sorted(gs)


def test_diagonal_optimum():
    a = hungarian_match([[1.0, 2.0], [2.0, 1.0]])
    assert a.pairs == [(0, 0), (1, 1)] and a.total_cost == 2.0


def test_single_entry():
    a = hungarian_match([[5.0]])
    assert a.pairs == [(0, 0)] and a.total_cost == 5.0
    assert brute_force_match([[5.0]]).pairs == [(0, 0)]


def test_empty():
    assert hungarian_match(np.zeros((0, 4))).pairs == []
    assert brute_force_match(np.zeros((3, 0))).total_cost == 0.0


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        hungarian_match([[1.0, np.inf]])
    with pytest.raises(ValueError):
        hungarian_match([[np.nan]])


def test_ties_prefer_lowest_index():
    assert hungarian_match(np.zeros((2, 3))).pairs == [(0, 0), (1, 1)]
    assert hungarian_match(np.ones((2, 3)), pad_square=False).pairs == [(0, 0), (1, 1)]


def test_deterministic_under_repeat():
    c = np.round(np.random.default_rng(0).uniform(size=(6, 9)), 1)
    assert hungarian_match(c).pairs == hungarian_match(c.copy()).pairs


@pytest.mark.parametrize("seed", range(30))
def test_random_7x7_matches_permutation_oracle(seed):
    c = np.random.default_rng(seed).uniform(size=(7, 7))
    a = hungarian_match(c)
    check_assignment(a, 7, 7)
    assert a.total_cost == perm_oracle(c)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**32 - 1), st.booleans(), st.booleans())
def test_rectangular_matches_oracles(m, n, seed, pad, integer):
    rng = np.random.default_rng(seed)
    c = rng.integers(0, 4, size=(m, n)).astype(float) if integer else rng.normal(size=(m, n))
    a = hungarian_match(c, pad_square=pad)
    check_assignment(a, m, n)
    assert a.total_cost == perm_oracle(c)
    b = brute_force_match(c)
    check_assignment(b, m, n)
    assert b.total_cost == a.total_cost


def test_accepts_cost_matrix():
    c = CostMatrix(np.array([[3.0, 1.0], [1.0, 3.0]]))
    assert hungarian_match(c).pairs == [(0, 1), (1, 0)]


def test_row_permutation_equivariance():
    rng = np.random.default_rng(3)
    c = rng.uniform(size=(5, 8))
    perm = np.array([2, 4, 0, 1, 3])
    a, b = brute_force_match(c).as_dict(), brute_force_match(c[perm]).as_dict()
    for new_row, old_row in enumerate(perm):
        assert b[new_row] == a[old_row]


def test_permutation_invariant_cost():
    rng = np.random.default_rng(4)
    c = rng.uniform(size=(6, 9))
    base = hungarian_match(c).total_cost
    shuffled = c[rng.permutation(6)][:, rng.permutation(9)]
    assert hungarian_match(shuffled).total_cost == pytest.approx(base, abs=1e-12)


def test_row_shift_keeps_assignment():
    rng = np.random.default_rng(5)
    c = rng.uniform(size=(5, 7))
    a = hungarian_match(c)
    shifted = c.copy()
    shifted[2] += 10.0
    b = hungarian_match(shifted)
    assert b.pairs == a.pairs
    assert b.total_cost == pytest.approx(a.total_cost + 10.0, abs=1e-12)


def test_brute_force_caps():
    with pytest.raises(ValueError):
        brute_force_match(np.zeros((10, 10)))
    with pytest.raises(ValueError):
        brute_force_match(np.zeros((9, 30)))


def test_tall_matrix():
    c = np.random.default_rng(6).uniform(size=(8, 3))
    for pad in (True, False):
        a = hungarian_match(c, pad_square=pad)
        check_assignment(a, 8, 3)
        assert a.total_cost == perm_oracle(c)
