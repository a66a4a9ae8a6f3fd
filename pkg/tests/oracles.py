"""Independent reference implementations used to freeze expected test values.

These deliberately use brute force or closed forms, not the library's own
code paths.
"""

from __future__ import annotations

import numpy as np


def chebyshev_min_max_dev(xs, ys) -> float:
    """Smallest achievable max |a*x + b - y| over all lines, by brute force.

    The residual-range objective is piecewise-linear convex in the slope, so
    the minimum is attained at a breakpoint; all pairwise slopes form a
    superset of the breakpoints.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    m = xs.size
    if m <= 2:
        return 0.0
    dx = xs[:, None] - xs[None, :]
    dy = ys[:, None] - ys[None, :]
    iu = np.triu_indices(m, k=1)
    cand = dy[iu] / dx[iu]
    resid = ys[:, None] - cand[None, :] * xs[:, None]
    widths = resid.max(axis=0) - resid.min(axis=0)
    return float(widths.min()) / 2.0


def line_fits(xs, ys, eps: float, tol: float = 1e-9) -> bool:
    return chebyshev_min_max_dev(xs, ys) <= eps + tol


def min_segments_dp(xs, ys, eps: float) -> int:
    """Minimum number of eps-bounded linear pieces covering the sequence.

    Uses the fact that window feasibility is monotone under shrinking, so the
    leftmost feasible start for each end advances monotonically.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    n = xs.size
    best = np.zeros(n + 1, dtype=np.int64)  # best[j] = min pieces for prefix of length j
    i = 0
    for j in range(n):
        while not line_fits(xs[i:j + 1], ys[i:j + 1], eps):
            i += 1
        best[j + 1] = best[i] + 1
    return int(best[n])


def ols_line(xs, ys) -> tuple[float, float]:
    """Ordinary least squares slope/intercept via numpy.polyfit."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.size == 1:
        return 0.0, float(ys[0])
    slope, intercept = np.polyfit(xs, ys, 1)
    return float(slope), float(intercept)


class SortedMapOracle:
    """Reference semantics for the gapped array: a plain key -> payload map."""

    def __init__(self):
        self.data: dict[int, int] = {}

    def lookup(self, key):
        return self.data.get(key)

    def insert(self, key, payload) -> bool:
        if key in self.data:
            return False
        self.data[key] = payload
        return True

    def delete(self, key) -> bool:
        return self.data.pop(key, None) is not None

    def update(self, key, payload) -> bool:
        if key in self.data:
            self.data[key] = payload
            return True
        return False

    def items_sorted(self):
        return sorted(self.data.items())
