"""Optimal assignment on square cost matrices with a deterministic tie-break.

Used in two places: picking the best output-to-reference permutation for the
permutation-invariant loss, and mapping reference to hypothesis labels when
scoring. Among equally cheap assignments the lexicographically smallest
(row 0's column first, then row 1's, ...) is returned, so repeated runs and
degenerate cost matrices stay reproducible.
"""
from __future__ import annotations

import math

import numpy as np


def _solve(cost: list[list[float]]) -> list[int]:
    """Augmenting-path Hungarian with potentials; returns row -> column."""
    n = len(cost)
    if n == 0:
        return []
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    match = [0] * (n + 1)  # column -> row (1-based, 0 = free)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = inf
            j1 = 0
            row = cost[i0 - 1]
            ui = u[i0]
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - ui - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    row_to_col = [0] * n
    for j in range(1, n + 1):
        if match[j]:
            row_to_col[match[j] - 1] = j - 1
    return row_to_col


def _assignment_total(cost: list[list[float]], rows: list[int], cols: list[int],
                      assign: list[int], extra: list[float]) -> float:
    entries = list(extra)
    entries.extend(cost[rows[k]][cols[assign[k]]] for k in range(len(assign)))
    return math.fsum(entries)


def hungarian(cost) -> list[int]:
    """Minimum-cost bijection rows -> columns of a square matrix.

    Raises ValueError for non-square or non-finite input. Ties between
    optimal assignments are broken lexicographically; totals are compared
    with math.fsum so mathematically equal sums compare equal regardless of
    summation order.
    """
    arr = np.asarray(cost, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"hungarian requires a square matrix, got {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError("hungarian requires finite costs")
    n = arr.shape[0]
    if n == 0:
        return []
    rows = arr.tolist()

    # Fix rows one at a time to the smallest column that still allows an
    # optimal completion; each candidate total is an fsum over a complete
    # assignment, so comparisons are exact for tie purposes.
    free = list(range(n))
    chosen: list[int] = []
    chosen_costs: list[float] = []
    for i in range(n):
        best_total = None
        best_col = free[0]
        for c in free:
            rest_cols = [cc for cc in free if cc != c]
            rest_rows = list(range(i + 1, n))
            if rest_rows:
                sub = [[rows[r][cc] for cc in rest_cols] for r in rest_rows]
                sub_assign = _solve(sub)
            else:
                sub_assign = []
            total = _assignment_total(rows, rest_rows, rest_cols, sub_assign,
                                      chosen_costs + [rows[i][c]])
            if best_total is None or total < best_total:
                best_total = total
                best_col = c
        chosen.append(best_col)
        chosen_costs.append(rows[i][best_col])
        free.remove(best_col)
    return chosen


def assignment_cost(cost, assign: list[int]) -> float:
    arr = np.asarray(cost, dtype=np.float64)
    return math.fsum(arr[i, j] for i, j in enumerate(assign))
