"""Minimum-cost entity-to-mask assignment (Hungarian method) and its CSV I/O.

Rectangular inputs are padded to a square with virtual entries costing
``max + 1``; entities matched to a virtual column are left unassigned.
Among several optimal assignments the lexicographically smallest column
vector is returned, found by fixing rows in order and re-solving.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class Assignment:
    columns: tuple[int, ...]  # column per row, -1 when unassigned
    cost: float
    row_labels: tuple[str, ...] = ()
    col_labels: tuple[str, ...] = ()

    def pairs(self) -> list[tuple[int, int]]:
        return [(r, c) for r, c in enumerate(self.columns) if c >= 0]

    def as_dict(self) -> dict[int, int]:
        return dict(self.pairs())


def _solve_square(a: np.ndarray) -> np.ndarray:
    """Row -> column of a minimum-cost perfect matching (potentials method, O(n^3))."""
    n = a.shape[0]
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[col] = row matched to col (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta, j1 = INF, 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta, j1 = minv[j], j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        cols[p[j] - 1] = j - 1
    return cols


def _min_cost(a: np.ndarray) -> float:
    if a.shape[0] == 0:
        return 0.0
    cols = _solve_square(a)
    return float(a[np.arange(a.shape[0]), cols].sum())


def _pad(cost: np.ndarray) -> np.ndarray:
    n, m = cost.shape
    k = max(n, m)
    fill = float(cost.max()) + 1.0 if cost.size else 1.0
    out = np.full((k, k), fill)
    out[:n, :m] = cost
    return out


def hungarian(cost, row_labels: Sequence[str] = (), col_labels: Sequence[str] = (),
              tol: Optional[float] = None) -> Assignment:
    """Minimum total cost injective assignment of rows to columns.

    ``tol`` bounds the slack accepted when testing whether a partial choice
    can still reach the optimum; defaults to ``1e-9 * (1 + |opt|) * n``.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    n, m = c.shape
    if n == 0 or m == 0:
        return Assignment(tuple([-1] * n), 0.0, tuple(row_labels), tuple(col_labels))
    a = _pad(c)
    k = a.shape[0]
    opt = _min_cost(a)
    if tol is None:
        tol = 1e-9 * (1.0 + abs(opt)) * k
    # Lexicographic tie-break: fix rows in order to the smallest feasible column.
    rows_left = list(range(k))
    cols_left = list(range(k))
    fixed_cost = 0.0
    choice = [-1] * k
    for r in range(k):
        rows_left.remove(r)
        for col in list(cols_left):
            rest_cols = [x for x in cols_left if x != col]
            rest = _min_cost(a[np.ix_(rows_left, rest_cols)]) if rows_left else 0.0
            if fixed_cost + a[r, col] + rest <= opt + tol:
                choice[r] = col
                fixed_cost += a[r, col]
                cols_left.remove(col)
                break
        else:  # numerically impossible unless tol is far too small
            raise RuntimeError("tie-break failed to reach the optimum; increase tol")
    columns = tuple(int(x) if x < m else -1 for x in choice[:n])
    total = float(sum(c[r, x] for r, x in enumerate(columns) if x >= 0))
    return Assignment(columns, total, tuple(row_labels), tuple(col_labels))


def brute_force(cost) -> float:
    """Exhaustive minimum over injective maps (n <= m), used as a reference."""
    from itertools import permutations

    c = np.asarray(cost, dtype=np.float64)
    n, m = c.shape
    if n > m:
        raise ValueError("brute force expects n <= m")
    rows = np.arange(n)
    return min(float(c[rows, list(p)].sum()) for p in permutations(range(m), n))


def assign_masks(similarity, row_labels: Sequence[str] = (),
                 col_labels: Sequence[str] = ()) -> tuple[Assignment, float]:
    """Maximise total similarity; returns the assignment and its total similarity."""
    s = np.asarray(similarity, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("similarity matrix has non-finite entries")
    cost = (s.max() - s) if s.size else s
    a = hungarian(cost, row_labels, col_labels)
    sim = float(sum(s[r, c] for r, c in a.pairs()))
    return a, sim


# ---------------------------------------------------------------- CSV


def read_matrix_csv(text: str) -> tuple[np.ndarray, list[str], list[str]]:
    """Parse ``row_label,col_label,value`` records into a dense matrix.

    Labels keep their first-appearance order; every (row, col) cell must be given
    exactly once.
    """
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["row_label", "col_label", "value"]:
        raise ValueError("expected header row_label,col_label,value")
    rows: list[str] = []
    cols: list[str] = []
    cells: dict[tuple[str, str], float] = {}
    for lineno, rec in enumerate(reader, start=2):
        if not rec or all(not x.strip() for x in rec):
            continue
        if len(rec) != 3:
            raise ValueError(f"line {lineno}: expected 3 fields")
        r, c, v = (x.strip() for x in rec)
        try:
            val = float(v)
        except ValueError:
            raise ValueError(f"line {lineno}: bad value {v!r}") from None
        if (r, c) in cells:
            raise ValueError(f"line {lineno}: duplicate cell ({r}, {c})")
        cells[(r, c)] = val
        if r not in rows:
            rows.append(r)
        if c not in cols:
            cols.append(c)
    if not cells:
        raise ValueError("empty matrix")
    if len(cells) != len(rows) * len(cols):
        raise ValueError("matrix is incomplete")
    mat = np.array([[cells[(r, c)] for c in cols] for r in rows])
    return mat, rows, cols


def write_assignment_csv(a: Assignment, similarity: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["entity", "mask", "similarity"])
    for r, c in enumerate(a.columns):
        rl = a.row_labels[r] if a.row_labels else str(r)
        if c < 0:
            w.writerow([rl, "", ""])
        else:
            cl = a.col_labels[c] if a.col_labels else str(c)
            w.writerow([rl, cl, repr(float(similarity[r, c]))])
    return buf.getvalue()
