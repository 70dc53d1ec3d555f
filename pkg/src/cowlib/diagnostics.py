"""Statistical pre-flight checks: rank correlation and pull computation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError

__all__ = ["IndependenceReport", "kendall_tau", "pull"]


@dataclass(frozen=True)
class IndependenceReport:
    """Kendall tau_b with its null-hypothesis normal-approximation scale.

    No verdict is attached; the numbers speak for themselves (a lack of
    correlation is necessary but not sufficient for independence).
    """

    tau: float
    n: int
    approx_sigma: float

    def to_dict(self) -> dict:
        return {"tau": self.tau, "n": self.n, "approx_sigma": self.approx_sigma}


def _merge_count(y: list) -> int:
    """Number of strict inversions in y, counted by merge sort."""
    n = len(y)
    if n < 2:
        return 0
    mid = n // 2
    left, right = y[:mid], y[mid:]
    inv = _merge_count(left) + _merge_count(right)
    merged = []
    i = j = 0
    while i < len(left) and j < len(right):
        if left[i] <= right[j]:
            merged.append(left[i])
            i += 1
        else:
            # left[i..] all exceed right[j]
            inv += len(left) - i
            merged.append(right[j])
            j += 1
    merged.extend(left[i:])
    merged.extend(right[j:])
    y[:] = merged
    return inv


def _tie_term(values: np.ndarray) -> int:
    _, counts = np.unique(values, return_counts=True)
    return int(np.sum(counts * (counts - 1) // 2))


def kendall_tau(x, y) -> IndependenceReport:
    """Tie-corrected Kendall rank correlation (tau_b) in O(n log n).

    Discordant pairs are counted by merge sort after ordering the sample by
    (x, y).  ``approx_sigma`` is the null-hypothesis standard deviation
    sqrt(2(2n+5) / (9 n (n-1))), which scales like 1/sqrt(n).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise EvaluationError("x and y must be 1-D with equal length")
    n = len(x)
    if n < 2:
        raise EvaluationError("need at least two observations")

    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]

    tot = n * (n - 1) // 2
    n1 = _tie_term(xs)
    n2 = _tie_term(ys)
    both = np.stack([xs, ys], axis=1)
    _, counts = np.unique(both, axis=0, return_counts=True)
    n3 = int(np.sum(counts * (counts - 1) // 2))

    if n1 == tot or n2 == tot:
        raise EvaluationError("tau undefined: one variable is constant")

    dis = _merge_count(list(ys))
    numerator = tot - n1 - n2 + n3 - 2 * dis
    tau = numerator / math.sqrt((tot - n1) * (tot - n2))
    sigma = math.sqrt(2.0 * (2 * n + 5) / (9.0 * n * (n - 1)))
    return IndependenceReport(tau=float(tau), n=n, approx_sigma=sigma)


def pull(estimate: float, truth: float, sigma: float) -> float:
    """Normalized residual (estimate - truth) / sigma."""
    if sigma <= 0:
        raise EvaluationError("sigma must be positive")
    return (estimate - truth) / sigma
