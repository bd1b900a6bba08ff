"""Minimum-cost bipartite assignment (Kuhn-Munkres with potentials).

:func:`hungarian` returns ``min(n, m)`` pairs of minimum total cost.  Among
equal-cost optima it returns the lexicographically smallest pair list: the
dual potentials of the solve identify every optimal assignment as a perfect
matching on the zero-reduced-cost edges, and a greedy pass over rows picks
the smallest column that still admits such a matching.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    unmatched_proposals: list[int]
    unmatched_targets: list[int] = field(default_factory=list)
    total_cost: float = 0.0

    @property
    def rows(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.intp)

    @property
    def cols(self) -> np.ndarray:
        return np.array([t for _, t in self.pairs], dtype=np.intp)


def _solve(cost: np.ndarray):
    """Shortest augmenting path solve for ``n <= m``; every row gets a column.

    Returns ``(row_to_col, u, v)`` with reduced costs ``c - u - v >= 0`` and
    zero on the matched edges; columns left unmatched have ``v == 0``.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.intp)   # owner[j] = row (1-based) holding column j
    way = np.zeros(m + 1, dtype=np.intp)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    row_to_col = np.full(n, -1, dtype=np.intp)
    for j in range(1, m + 1):
        if owner[j]:
            row_to_col[owner[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def hungarian(cost) -> MatchResult:
    """Minimum-cost assignment of rows (proposals) to columns (targets)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise NumericError(f"cost must be a matrix, got shape {cost.shape}")
    n, m = cost.shape
    if n == 0 or m == 0:
        return MatchResult([], list(range(n)), list(range(m)), 0.0)
    if not np.all(np.isfinite(cost)):
        raise NumericError("cost matrix contains non-finite entries")

    transposed = n > m
    c = cost.T if transposed else cost
    a, b = c.shape
    row_to_col, u, v = _solve(c)

    size = max(n, m)
    tol = 1e-9 * max(1.0, float(np.abs(c).max()))
    tight = np.zeros((size, size), dtype=bool)
    tight[:a, :b] = np.abs(c - u[:, None] - v[None, :]) <= tol
    tight[a:, :b] = (np.abs(v) <= tol)[None, :]
    col_of = np.empty(size, dtype=np.intp)
    col_of[:a] = row_to_col
    free_cols = [j for j in range(b) if j not in set(row_to_col.tolist())]
    col_of[a:] = free_cols
    if transposed:
        tight = tight.T.copy()
        inv = np.empty(size, dtype=np.intp)
        inv[col_of] = np.arange(size)
        col_of = inv

    col_of = _canonical(tight, col_of, n, m)
    pairs = [(i, int(col_of[i])) for i in range(n) if col_of[i] < m]
    matched_rows = {p for p, _ in pairs}
    matched_cols = {t for _, t in pairs}
    total = float(sum(cost[i, j] for i, j in pairs))
    return MatchResult(pairs,
                       [i for i in range(n) if i not in matched_rows],
                       [j for j in range(m) if j not in matched_cols],
                       total)


def _canonical(tight: np.ndarray, col_of: np.ndarray, n: int, m: int) -> np.ndarray:
    """Lexicographically smallest perfect matching on ``tight`` (rows < n, columns < m real)."""
    size = tight.shape[0]
    col_of = col_of.copy()
    row_of = np.empty(size, dtype=np.intp)
    row_of[col_of] = np.arange(size)
    fixed_rows = np.zeros(size, dtype=bool)
    fixed_cols = np.zeros(size, dtype=bool)

    for i in range(n):
        current = col_of[i]
        limit = min(current, m)
        for j in np.flatnonzero(tight[i, :limit] & ~fixed_cols[:limit]):
            if _reroute(tight, col_of, row_of, fixed_rows, fixed_cols, i, int(j), m):
                break
        fixed_rows[i] = True
        fixed_cols[col_of[i]] = True
    return col_of


def _reroute(tight, col_of, row_of, fixed_rows, fixed_cols, i: int, j: int, m: int) -> bool:
    """Give column ``j`` to row ``i``, re-matching the displaced row along tight edges."""
    target = col_of[i]
    start = row_of[j]
    reached_from: dict[int, int] = {}
    seen_rows = {start, i}
    queue = deque([start])
    end = -1
    while queue and end < 0:
        r = queue.popleft()
        for c in np.flatnonzero(tight[r] & ~fixed_cols):
            c = int(c)
            if c == j or c in reached_from:
                continue
            reached_from[c] = r
            if c == target or (target >= m and c >= m):
                end = c
                break
            nxt = row_of[c]
            if nxt not in seen_rows and not fixed_rows[nxt]:
                seen_rows.add(nxt)
                queue.append(nxt)
    if end < 0:
        return False
    if end != target:
        # two interchangeable dummy columns: hand ``target`` to the row on ``end``
        other = row_of[end]
        col_of[other], row_of[target] = target, other
    c = end
    while True:
        r = reached_from[c]
        prev = col_of[r]
        col_of[r], row_of[c] = c, r
        if r == start:
            break
        c = prev
    col_of[i], row_of[j] = j, i
    return True
