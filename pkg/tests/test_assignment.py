import itertools
import math

import numpy as np
import pytest

from tsvad.assignment import assignment_cost, hungarian


def brute_force(cost: np.ndarray) -> tuple[list[int], float]:
    """Exhaustive oracle: best assignment, lexicographically smallest on ties.

    Totals are compared with math.fsum so ties are exact, matching the
    contract of the solver under test.
    """
    n = cost.shape[0]
    best_perm = None
    best_total = None
    for perm in itertools.permutations(range(n)):
        total = math.fsum(cost[i, perm[i]] for i in range(n))
        if best_total is None or total < best_total:
            best_total = total
            best_perm = perm
    return list(best_perm), best_total


def test_identity_diagonal():
    cost = np.ones((4, 4)) - np.eye(4)
    assert hungarian(cost) == [0, 1, 2, 3]


def test_hand_two_by_two():
    assert hungarian([[4.0, 1.0], [2.0, 0.0]]) == [1, 0]
    assert assignment_cost([[4.0, 1.0], [2.0, 0.0]], [1, 0]) == 3.0


def test_non_square_rejected():
    with pytest.raises(ValueError):
        hungarian(np.ones((2, 3)))


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        hungarian([[np.inf, 0.0], [0.0, 1.0]])


def test_tie_break_lexicographic():
    # every assignment costs 2; smallest is the identity
    assert hungarian(np.ones((3, 3))) == [0, 1, 2]
    # two optima: (0->0,1->1) and (0->1,1->0), both cost 2
    assert hungarian([[1.0, 1.0], [1.0, 1.0]]) == [0, 1]
    # forced off-diagonal optimum with an internal tie
    cost = np.array([[5.0, 1.0, 1.0], [1.0, 5.0, 5.0], [5.0, 5.0, 1.0]])
    perm, total = brute_force(cost)
    assert hungarian(cost) == perm
    assert assignment_cost(cost, perm) == total


@pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
def test_matches_brute_force_on_random_matrices(n):
    rng = np.random.default_rng(100 + n)
    for _ in range(120):
        cost = rng.uniform(-5.0, 5.0, size=(n, n))
        got = hungarian(cost)
        want, want_total = brute_force(cost)
        assert got == want
        assert assignment_cost(cost, got) == want_total


def test_matches_brute_force_with_ties():
    rng = np.random.default_rng(999)
    for _ in range(200):
        n = int(rng.integers(2, 5))
        cost = rng.integers(0, 3, size=(n, n)).astype(float)
        got = hungarian(cost)
        want, _ = brute_force(cost)
        assert got == want
