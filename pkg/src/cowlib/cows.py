"""Generalized orthogonal weight functions for n-component mixtures.

The weight functions are rows of the inverse of the Gram matrix
W_kl = integral of g_k g_l / I over the support, for a chosen strictly
positive variance function I(m).  With I equal to the fitted mixture this
reduces to the classic two-component signal/background weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .densities import (Density1D, EfficiencyMap, Histogram1D, Interval,
                        ZERO_BIN_FLOOR, histogram_density, integrate)
from .errors import (ConstructionError, EvaluationError,
                     IllConditionedBasisError, NonConvergenceError)

__all__ = [
    "UnityVariance",
    "HistogramVariance",
    "MixtureVariance",
    "CowSpec",
    "CowSet",
    "build_cow",
    "variance_fn_qm",
    "variance_fn_ml_iterative",
    "estimate_fractions",
    "efficiency_corrected_weights",
]

CONDITION_LIMIT = 1e12
MIN_EFFICIENCY = 1e-6
POSITIVITY_PROBE_POINTS = 2001


class UnityVariance:
    """Constant variance function I(m) = 1."""

    in_span = False

    def __call__(self, m):
        return np.ones_like(np.asarray(m, dtype=float))

    def breakpoints(self):
        return []


class HistogramVariance:
    """Piecewise-constant variance function from a histogram of m."""

    in_span = False

    def __init__(self, hist):
        if isinstance(hist, Density1D):
            if hist.kind != "histogram":
                raise ConstructionError("HistogramVariance needs a histogram density")
            self.density = hist
        elif isinstance(hist, Histogram1D):
            contents = hist.contents.copy()
            positive = contents[contents > 0]
            if positive.size == 0:
                raise ConstructionError("histogram variance function is empty")
            contents[contents <= 0] = positive.min() * ZERO_BIN_FLOOR
            support = Interval(hist.edges[0], hist.edges[-1])
            self.density = Density1D("histogram", [], support,
                                     {"edges": hist.edges, "contents": contents})
        else:
            raise ConstructionError("expected Histogram1D or histogram Density1D")

    def __call__(self, m):
        return self.density.pdf(m)

    def breakpoints(self):
        return self.density.breakpoints()


class MixtureVariance:
    """I(m) as a linear combination of the basis densities (in-span choice)."""

    in_span = True

    def __init__(self, fractions, basis: Sequence[Density1D]):
        self.fractions = np.asarray(fractions, dtype=float)
        self.basis = list(basis)
        if len(self.fractions) != len(self.basis):
            raise ConstructionError("one fraction per basis element required")
        if np.any(self.fractions < 0):
            # negative fitted fractions can make I(m) change sign; rejected
            raise ConstructionError("mixture variance function needs fractions >= 0")
        if self.fractions.sum() <= 0:
            raise ConstructionError("mixture variance function needs a positive sum")

    def __call__(self, m):
        return sum(z * g.pdf(m) for z, g in zip(self.fractions, self.basis))

    def breakpoints(self):
        pts = []
        for g in self.basis:
            pts.extend(g.breakpoints())
        return sorted(set(pts))


@dataclass
class CowSpec:
    """Recipe for a set of custom orthogonal weight functions.

    ``basis`` lists the component densities with the signal block first
    (``n_signal`` elements).  ``signal_proxy`` optionally replaces the first
    basis element when only the signal shape in the control variable matters.
    """

    basis: List[Density1D]
    variance_fn: object
    support: Interval
    n_signal: int = 1
    signal_proxy: Optional[Density1D] = None
    efficiency: Optional[EfficiencyMap] = None

    def __post_init__(self):
        if len(self.basis) < 1:
            raise ConstructionError("basis must contain at least one density")
        if not 1 <= self.n_signal <= len(self.basis):
            raise ConstructionError("n_signal must lie in [1, len(basis)]")
        grid = np.linspace(self.support.lo, self.support.hi, POSITIVITY_PROBE_POINTS)
        if np.any(np.asarray(self.variance_fn(grid)) <= 0):
            raise ConstructionError(
                "variance function must be strictly positive on the support")

    def effective_basis(self) -> List[Density1D]:
        if self.signal_proxy is None:
            return list(self.basis)
        return [self.signal_proxy] + list(self.basis[1:])


class CowSet:
    """Built weight functions w_k(m) = sum_l A_kl g_l(m) / I(m)."""

    def __init__(self, spec: CowSpec, W: np.ndarray, A: np.ndarray):
        self.spec = spec
        self.W = W
        self.A = A
        self._basis = spec.effective_basis()

    @property
    def n_components(self) -> int:
        return len(self._basis)

    def basis_values(self, m) -> np.ndarray:
        m = np.atleast_1d(np.asarray(m, dtype=float))
        return np.stack([g.pdf(m) for g in self._basis])  # (n, len(m))

    def weights(self, m) -> np.ndarray:
        """All weight functions at m; shape (len(m), n_components)."""
        m = np.atleast_1d(np.asarray(m, dtype=float))
        gv = self.basis_values(m)
        I = np.asarray(self.spec.variance_fn(m), dtype=float)
        if np.any(I <= 0):
            raise EvaluationError("variance function non-positive at evaluation point")
        return (self.A @ gv).T / I[:, None]

    def w_k(self, k: int, m) -> np.ndarray:
        return self.weights(m)[:, k]

    def signal_weight(self, m) -> np.ndarray:
        """Sum of the signal-block weight functions."""
        return self.weights(m)[:, : self.spec.n_signal].sum(axis=1)


def build_cow(spec: CowSpec, tol: float = 1e-9) -> CowSet:
    """Compute the W matrix by quadrature and invert it.

    Raises :class:`~cowlib.errors.IllConditionedBasisError` when the Gram
    matrix condition number exceeds 1e12 (typically too many polynomial
    terms for the sample).
    """
    basis = spec.effective_basis()
    n = len(basis)
    pts = set(spec.variance_fn.breakpoints())
    for g in basis:
        pts.update(g.breakpoints())
    pts = sorted(pts)

    W = np.empty((n, n))
    for k in range(n):
        for l in range(k, n):
            def f(m, gk=basis[k], gl=basis[l]):
                return gk.pdf(m) * gl.pdf(m) / spec.variance_fn(m)
            W[k, l] = W[l, k] = integrate(f, spec.support, tol, points=pts)

    cond = np.linalg.cond(W)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise IllConditionedBasisError(
            f"W matrix condition number {cond:.3g} exceeds {CONDITION_LIMIT:g}; "
            "try fewer polynomial terms")
    try:
        c, low = cho_factor(W)
        A = cho_solve((c, low), np.eye(n))
    except np.linalg.LinAlgError:
        A = np.linalg.solve(W, np.eye(n))
    A = 0.5 * (A + A.T)
    return CowSet(spec, W, A)


def variance_fn_qm(data, eff: EfficiencyMap, bins: int,
                   support: Optional[Interval] = None) -> Histogram1D:
    """Histogram estimate of the 1/efficiency^2-weighted m marginal.

    This is the minimum-variance choice of I(m) under a non-uniform
    efficiency; a single bin is equivalent to I(m) = 1.  ``support`` sets the
    binning range (default: the observed range of m); pass the analysis
    interval so the variance function is defined on all of it.
    """
    data = np.asarray(data, dtype=float)
    m, t = data[:, 0], data[:, 1]
    e = np.asarray(eff(m, t), dtype=float)
    if np.any(e <= 0):
        raise EvaluationError("efficiency must be positive at all data points")
    if bins < 1:
        raise ConstructionError("bins must be >= 1")
    if support is not None:
        lo, hi = support.as_tuple()
    else:
        lo, hi = float(np.min(m)), float(np.max(m))
    edges = np.linspace(lo, hi, bins + 1)
    hist = Histogram1D.fill(m, 1.0 / e ** 2, edges)
    total = float(np.sum(hist.contents))
    return Histogram1D(edges, hist.contents / total, hist.sumw2 / total ** 2)


def estimate_fractions(cow: CowSet, data, eff: Optional[EfficiencyMap] = None
                       ) -> Tuple[np.ndarray, float]:
    """Component fractions from efficiency-corrected sample averages.

    Returns (fractions, D_hat) with D_hat the harmonic mean of the
    efficiencies; D_hat = 1 for unit efficiency.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        m = data
        t = np.zeros_like(m)
    else:
        m, t = data[:, 0], data[:, 1]
    n = len(m)
    if eff is None:
        inv_e = np.ones(n)
    else:
        e = np.asarray(eff(m, t), dtype=float)
        if np.any(e <= 0):
            raise EvaluationError("efficiency must be positive at all data points")
        inv_e = 1.0 / e
    d_hat = 1.0 / float(np.mean(inv_e))
    w = cow.weights(m)  # (n, n_comp)
    z = d_hat / n * (w * inv_e[:, None]).sum(axis=0)
    return z, d_hat


def variance_fn_ml_iterative(basis: Sequence[Density1D], data,
                             eff: Optional[EfficiencyMap] = None,
                             max_iter: Optional[int] = None,
                             tol: float = 1e-8,
                             ) -> Tuple[np.ndarray, MixtureVariance]:
    """Iterate I(m) = sum z_k g_k with fractions re-estimated each step.

    Starts from equal fractions; a handful of steps (about the number of
    components) normally suffices.  Fractions leaving [0, 1] are clipped and
    renormalized.  Raises :class:`~cowlib.errors.NonConvergenceError` with
    the iteration trace if the tolerance is not reached.
    """
    basis = list(basis)
    n = len(basis)
    support = basis[0].support
    if max_iter is None:
        max_iter = 2 * n + 10
    if max_iter < 1:
        raise ConstructionError("max_iter must be >= 1")
    z = np.full(n, 1.0 / n)
    trace = [z.copy()]
    clipped = False
    for _ in range(max_iter):
        var = MixtureVariance(z, basis)
        spec = CowSpec(basis=basis, variance_fn=var, support=support)
        cow = build_cow(spec)
        z_new, _ = estimate_fractions(cow, data, eff)
        if np.any(z_new < 0) or np.any(z_new > 1):
            clipped = True
            z_new = np.clip(z_new, 0.0, 1.0)
        s = z_new.sum()
        if s <= 0:
            raise NonConvergenceError("all fractions clipped to zero", trace)
        z_new = z_new / s
        trace.append(z_new.copy())
        if np.max(np.abs(z_new - z)) < tol:
            var = MixtureVariance(z_new, basis)
            var.clipped = clipped
            return z_new, var
        z = z_new
    raise NonConvergenceError(
        f"fraction iteration did not converge in {max_iter} steps", trace)


def efficiency_corrected_weights(cow: CowSet, eff: Optional[EfficiencyMap],
                                 data) -> np.ndarray:
    """Per-event weights w_k(m_i) / efficiency(m_i, t_i), shape (N, n)."""
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        m = data
        t = np.zeros_like(m)
    else:
        m, t = data[:, 0], data[:, 1]
    w = cow.weights(m)
    if eff is None:
        return w
    e = np.asarray(eff(m, t), dtype=float)
    if np.any(e < MIN_EFFICIENCY):
        i = int(np.argmax(e < MIN_EFFICIENCY))
        raise EvaluationError(
            f"efficiency below {MIN_EFFICIENCY:g} at event {i}; weights would blow up")
    return w / e[:, None]
