"""Adaptive Gauss-Kronrod quadrature with vectorized integrand evaluation.

The integrand is evaluated on whole arrays of abscissae at once, which makes
the scheme fast for numpy-vectorized densities.  Scalar-only callables are
wrapped transparently.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from .errors import IntegrationError

MAX_SUBDIVISIONS = 2 ** 15

# 15-point Kronrod extension of the 7-point Gauss rule on [-1, 1].
_XK = np.array([
    -0.991455371120813, -0.949107912342759, -0.864864423359769,
    -0.741531185599394, -0.586087235467691, -0.405845151377397,
    -0.207784955007898, 0.0,
    0.207784955007898, 0.405845151377397, 0.586087235467691,
    0.741531185599394, 0.864864423359769, 0.949107912342759,
    0.991455371120813,
])
_WK = np.array([
    0.022935322010529, 0.063092092629979, 0.104790010322250,
    0.140653259715525, 0.169004726639267, 0.190350578064785,
    0.204432940075298, 0.209482141084728,
    0.204432940075298, 0.190350578064785, 0.169004726639267,
    0.140653259715525, 0.104790010322250, 0.063092092629979,
    0.022935322010529,
])
# Weights of the embedded 7-point Gauss rule, aligned with every second
# Kronrod node (indices 1, 3, 5, 7, 9, 11, 13).
_WG = np.array([
    0.129484966168870, 0.279705391489277, 0.381830050505119,
    0.417959183673469,
    0.381830050505119, 0.279705391489277, 0.129484966168870,
])
_G_IDX = np.arange(1, 15, 2)


def _vectorized(f: Callable) -> Callable:
    probe = np.array([0.5, 0.25])
    try:
        out = np.asarray(f(probe), dtype=float)
        if out.shape == probe.shape:
            return f
    except Exception:
        pass
    return lambda x: np.array([f(v) for v in np.atleast_1d(x)], dtype=float)


def _gk15(f, lo: np.ndarray, hi: np.ndarray):
    """Apply the GK15 rule on a batch of intervals.

    Returns (kronrod estimate, error estimate) per interval.
    """
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    # shape (n_intervals, 15)
    x = mid[:, None] + half[:, None] * _XK[None, :]
    y = f(x.ravel()).reshape(x.shape)
    if not np.all(np.isfinite(y)):
        bad = x.ravel()[~np.isfinite(y.ravel())][0]
        raise IntegrationError(
            f"integrand non-finite at m={bad!r}", np.nan, np.inf)
    k = half * (y @ _WK)
    g = half * (y[:, _G_IDX] @ _WG)
    # scipy-style sharpened error estimate for smooth integrands
    resabs = half * (np.abs(y) @ _WK)
    diff = np.abs(k - g)
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(
            resabs > 0, np.minimum(1.0, (200.0 * diff / np.maximum(resabs, 1e-300)) ** 1.5), 0.0)
    err = np.where(resabs > 0, resabs * scaled, diff)
    err = np.maximum(err, np.abs(k) * 1e-15)
    return k, err


def integrate(
    f: Callable,
    lo: float,
    hi: float,
    tol: float = 1e-9,
    points: Optional[Iterable[float]] = None,
) -> float:
    """Integrate ``f`` over [lo, hi] to absolute accuracy ``tol``.

    ``points`` lists known breakpoints (e.g. density discontinuities); the
    initial subdivision is split there so each cell is smooth.

    Raises
    ------
    IntegrationError
        If the error target is not met after the subdivision budget; the
        exception carries the best estimate.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise ValueError(f"invalid interval [{lo}, {hi}]")
    fv = _vectorized(f)
    edges = [lo, hi]
    if points is not None:
        edges.extend(p for p in points if lo < p < hi)
    edges = np.array(sorted(set(edges)))
    los, his = edges[:-1], edges[1:]
    vals, errs = _gk15(fv, los, his)
    for _ in range(MAX_SUBDIVISIONS):
        total_err = errs.sum()
        if total_err <= tol:
            return float(vals.sum())
        if len(los) >= MAX_SUBDIVISIONS:
            break
        # split the worst interval
        i = int(np.argmax(errs))
        a, b = los[i], his[i]
        m = 0.5 * (a + b)
        if not (a < m < b):
            break  # interval exhausted at machine precision
        nlo = np.array([a, m])
        nhi = np.array([m, b])
        nv, ne = _gk15(fv, nlo, nhi)
        los = np.concatenate([np.delete(los, i), nlo])
        his = np.concatenate([np.delete(his, i), nhi])
        vals = np.concatenate([np.delete(vals, i), nv])
        errs = np.concatenate([np.delete(errs, i), ne])
    estimate = float(vals.sum())
    raise IntegrationError(
        f"quadrature did not reach tol={tol:g} (err={errs.sum():.3g})",
        estimate, float(errs.sum()))
