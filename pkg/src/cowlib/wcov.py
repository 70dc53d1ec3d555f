"""Correct covariance matrices for parameters fitted to weighted data.

Weighted likelihoods are M-estimators, not true likelihoods, so the inverse
Hessian is not a valid covariance.  Two corrections are provided: the full
two-step sandwich over the joint quasi-score (yields, shape parameters, W
matrix elements and the parameters of interest), and the simplified formula
for the case where the discriminating-variable shapes are known.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .densities import Density1D
from .errors import EvaluationError

__all__ = [
    "QuasiScoreSpec",
    "CorrectedCovariance",
    "corrected_covariance_full",
    "corrected_covariance_fixed_shapes",
    "corrected_covariance_cow",
    "variance_sum_weights",
    "equivalent_events",
]

ROOT_TOL_PER_EVENT = 1e-4
JACOBIAN_REL_STEP = 1e-6
LOG_DERIV_STEP = 1e-6
LOG_DERIV2_STEP = 1e-4


def variance_sum_weights(weights) -> float:
    """Variance estimate of a Poisson-fluctuating sum of iid weights: sum w^2."""
    w = np.asarray(weights, dtype=float)
    if not np.all(np.isfinite(w)):
        raise EvaluationError("weights must be finite")
    return float(np.sum(w ** 2))


def equivalent_events(weights) -> float:
    """Effective statistical sample size (sum w)^2 / sum w^2."""
    w = np.asarray(weights, dtype=float)
    sw2 = np.sum(w ** 2)
    if sw2 == 0:
        raise EvaluationError("sum of squared weights is zero")
    sw = np.sum(w)
    if sw == 0:
        raise EvaluationError("sum of weights is zero")
    return float(sw ** 2 / sw2)


def _log_derivs1(density: Density1D, t: np.ndarray, theta: np.ndarray,
                 rel_step: float = LOG_DERIV_STEP) -> np.ndarray:
    """First derivatives of ln density wrt its parameters; shape (p, N)."""
    p = len(theta)
    out = np.empty((p, len(t)))
    for k in range(p):
        h = rel_step * max(abs(theta[k]), 1.0)
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        out[k] = (density.with_params(tp).logpdf(t)
                  - density.with_params(tm).logpdf(t)) / (2 * h)
    return out


def _log_derivs2(density: Density1D, t: np.ndarray, theta: np.ndarray,
                 rel_step: float = LOG_DERIV2_STEP) -> np.ndarray:
    """Second derivatives of ln density wrt its parameters; shape (p, p, N)."""
    p = len(theta)
    steps = rel_step * np.maximum(np.abs(theta), 1.0)
    l0 = density.with_params(theta).logpdf(t)
    out = np.empty((p, p, len(t)))
    for k in range(p):
        ek = np.zeros(p)
        ek[k] = steps[k]
        lp = density.with_params(theta + ek).logpdf(t)
        lm = density.with_params(theta - ek).logpdf(t)
        out[k, k] = (lp - 2 * l0 + lm) / steps[k] ** 2
        for l in range(k + 1, p):
            el = np.zeros(p)
            el[l] = steps[l]
            v = (density.with_params(theta + ek + el).logpdf(t)
                 - density.with_params(theta + ek - el).logpdf(t)
                 - density.with_params(theta - ek + el).logpdf(t)
                 + density.with_params(theta - ek - el).logpdf(t)
                 ) / (4 * steps[k] * steps[l])
            out[k, l] = out[l, k] = v
    return out


@dataclass
class CorrectedCovariance:
    """Corrected covariance for the control-variable parameters.

    ``theta_block`` is the corrected p x p covariance; ``naive`` the (wrong)
    inverse Hessian of the weighted likelihood for comparison.  On the
    fixed-shape path ``first_term`` and ``reduction_term`` are the two pieces
    of the correction (the reduction is PSD and is subtracted).
    """

    theta_block: np.ndarray
    naive: Optional[np.ndarray]
    full: Optional[np.ndarray] = None
    first_term: Optional[np.ndarray] = None
    reduction_term: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()
        return {"theta_block": arr(self.theta_block), "naive": arr(self.naive),
                "full": arr(self.full), "first_term": arr(self.first_term),
                "reduction_term": arr(self.reduction_term)}


def _naive_covariance(hs: Density1D, t, weights, theta) -> Optional[np.ndarray]:
    d2 = _log_derivs2(hs, t, theta)
    H = np.einsum("i,kli->kl", weights, d2)
    try:
        return np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        return None


def corrected_covariance_fixed_shapes(
    data_t,
    weights,
    dW: Optional[np.ndarray],
    hs_model: Density1D,
    theta_hat,
    *,
    gs: Optional[Density1D] = None,
    gb: Optional[Density1D] = None,
    yields: Optional[Sequence[float]] = None,
    data_m=None,
    cprime: Optional[np.ndarray] = None,
) -> CorrectedCovariance:
    """Covariance correction when the shapes in m are known.

    ``dW`` holds per-event derivatives of the signal weight wrt
    (W_ss, W_sb, W_bb), shape (N, 3); pass None for externally supplied
    fixed weights, which reduces the result to the plain sandwich.  The
    C' matrix is built from (gs, gb, yields, data_m) unless given directly.
    """
    t = np.asarray(data_t, dtype=float)
    w = np.asarray(weights, dtype=float)
    theta = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    p = len(theta)

    d1 = _log_derivs1(hs_model, t, theta)          # (p, N)
    d2 = _log_derivs2(hs_model, t, theta)          # (p, p, N)
    H = np.einsum("i,kli->kl", w, d2)
    Hp = (w ** 2 * d1) @ d1.T
    try:
        Hinv = np.linalg.inv(H)
    except np.linalg.LinAlgError as exc:
        raise EvaluationError("weighted Hessian is singular") from exc

    first = Hinv @ Hp @ Hinv.T

    if dW is None:
        reduction = np.zeros((p, p))
    else:
        dW = np.asarray(dW, dtype=float)
        # C' below is the covariance of the per-event-sum estimator of W,
        # which carries a 1/N relative to the density-scale W that dW refers
        # to; the weight is scale-invariant in W, so rescaling dW by N puts
        # both factors of the quadratic form on the same convention.
        E = len(t) * (d1 @ dW)                      # (p, 3)
        if cprime is None:
            if gs is None or gb is None or yields is None or data_m is None:
                raise EvaluationError(
                    "need (gs, gb, yields, data_m) or a precomputed cprime")
            m = np.asarray(data_m, dtype=float)
            ns, nb = float(yields[0]), float(yields[1])
            s = gs.pdf(m)
            b = gb.pdf(m)
            f = ns * s + nb * b
            P = np.stack([s * s, s * b, b * b]) / f ** 2   # (3, N)
            cprime = P @ P.T
        reduction = Hinv @ E @ cprime @ E.T @ Hinv.T

    reduction = 0.5 * (reduction + reduction.T)
    first = 0.5 * (first + first.T)
    naive = _naive_covariance(hs_model, t, w, theta)
    return CorrectedCovariance(theta_block=first - reduction, naive=naive,
                               first_term=first, reduction_term=reduction)


def corrected_covariance_cow(cow, data, hs_model: Density1D, theta_hat,
                             eff=None, quad_points: int = 16,
                             n_boot: int = 400, boot_seed: int = 0,
                             ) -> CorrectedCovariance:
    """Sandwich covariance for a fit weighted with orthogonal weight functions.

    For a deterministic variance function this is the plain weighted-score
    sandwich H^-1 H' H^-T.  When the variance function of ``cow`` is a
    histogram that was filled from this same sample with 1/efficiency^2
    event weights, the weight functions carry sampling noise from the
    estimated bin contents; the score covariance is then estimated with a
    one-step Poisson bootstrap that refills the histogram and rebuilds the
    weight matrix per replica, which captures the (strongly nonlinear)
    response of the weights to the bin contents.  Replicas are cheap
    because the histogram variance function is piecewise constant, so the
    weight matrix is an exact sum of per-bin basis integrals.
    """
    from .cows import HistogramVariance
    from .densities import ZERO_BIN_FLOOR

    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[1] < 2:
        raise EvaluationError("data must have columns (m, t)")
    m, t = data[:, 0], data[:, 1]
    n = len(m)
    theta = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    n_sig = cow.spec.n_signal

    if eff is None:
        inv_e = np.ones(n)
    else:
        e = np.asarray(eff(m, t), dtype=float)
        if np.any(e <= 0):
            raise EvaluationError("efficiency must be positive at all data points")
        inv_e = 1.0 / e
    w_m = cow.weights(m)[:, :n_sig].sum(axis=1)    # weight function values
    w = w_m * inv_e                                # fit weights

    d1 = _log_derivs1(hs_model, t, theta)          # (p, N)
    d2 = _log_derivs2(hs_model, t, theta)
    H = np.einsum("i,kli->kl", w, d2)
    try:
        Hinv = np.linalg.inv(H)
    except np.linalg.LinAlgError as exc:
        raise EvaluationError("weighted Hessian is singular") from exc

    var = cow.spec.variance_fn
    if isinstance(var, HistogramVariance):
        if n_boot < 2:
            raise EvaluationError("n_boot must be at least 2")
        edges = np.asarray(var.density.data["edges"], dtype=float)
        nbins = len(edges) - 1
        widths = np.diff(edges)

        # per-bin basis integrals B_klj of g_k g_l by Gauss-Legendre; the
        # weight matrix for any bin contents is then W_kl = sum_j B_klj / I_j
        x, gq = np.polynomial.legendre.leggauss(quad_points)
        half = 0.5 * widths
        nodes = (0.5 * (edges[1:] + edges[:-1]))[:, None] + half[:, None] * x[None, :]
        gv = cow.basis_values(nodes.ravel())
        nb = gv.shape[0]
        gv = gv.reshape(nb, nbins, quad_points)
        B = np.einsum("kjq,ljq,q,j->klj", gv, gv, gq, half)

        G = cow.basis_values(m)                    # (nb, N)
        jidx = np.clip(np.searchsorted(edges, m, side="right") - 1, 0, nbins - 1)
        fill = inv_e ** 2                          # histogram fill weights
        sel = np.zeros(nb)
        sel[:n_sig] = 1.0

        rng = np.random.default_rng(boot_seed)
        scores = np.empty((n_boot, len(theta)))
        kept = 0
        for _ in range(n_boot):
            mult = rng.poisson(1.0, size=n)
            raw = np.bincount(jidx, weights=mult * fill, minlength=nbins)
            pos = raw[raw > 0]
            if pos.size == 0:
                continue
            raw = np.where(raw > 0, raw, pos.min() * ZERO_BIN_FLOOR)
            I_bins = raw / (widths * raw.sum())
            try:
                A = np.linalg.inv(np.einsum("klj,j->kl", B, 1.0 / I_bins))
            except np.linalg.LinAlgError:
                continue
            w_rep = ((sel @ A) @ G) / I_bins[jidx] * inv_e
            scores[kept] = d1 @ (mult * w_rep)
            kept += 1
        if kept < 2:
            raise EvaluationError("bootstrap score covariance unavailable")
        CS = np.cov(scores[:kept].T, ddof=1).reshape(len(theta), len(theta))
    else:
        psi = w * d1
        CS = psi @ psi.T

    theta_block = Hinv @ CS @ Hinv.T
    theta_block = 0.5 * (theta_block + theta_block.T)
    Hp = (w ** 2 * d1) @ d1.T
    first = Hinv @ Hp @ Hinv.T
    naive = _naive_covariance(hs_model, t, w, theta)
    return CorrectedCovariance(theta_block=theta_block, naive=naive,
                               first_term=0.5 * (first + first.T))


@dataclass
class QuasiScoreSpec:
    """Ingredients of the joint quasi-score for two-step M-estimation.

    Parameter vector ordering: (N_s, N_b, phi..., W_ss, W_sb, W_bb, theta...)
    where phi lists the free shape parameters declared in ``phi_free`` as
    ("s"|"b", param index) pairs and theta are all parameters of ``hs``.
    The W block lives on the Hessian scale (variant-B W divided by N); the
    weight function is scale-invariant in W so this is a pure convention.
    """

    gs: Density1D
    gb: Density1D
    hs: Density1D
    phi_free: Tuple[Tuple[str, int], ...] = ()

    @property
    def n_phi(self) -> int:
        return len(self.phi_free)

    @property
    def n_theta(self) -> int:
        return self.hs.n_params

    @property
    def dim(self) -> int:
        return 2 + self.n_phi + 3 + self.n_theta

    def unpack(self, lam: np.ndarray):
        n = self.n_phi
        ns, nb = lam[0], lam[1]
        phi = lam[2:2 + n]
        Wv = lam[2 + n:5 + n]
        theta = lam[5 + n:]
        gs, gb = self.gs, self.gb
        for val, (comp, idx) in zip(phi, self.phi_free):
            if comp == "s":
                params = gs.params.copy()
                params[idx] = val
                gs = gs.with_params(params)
            else:
                params = gb.params.copy()
                params[idx] = val
                gb = gb.with_params(params)
        return ns, nb, gs, gb, Wv, theta

    def lambda_from_fits(self, data_m, mfit, tfit) -> np.ndarray:
        """Assemble the parameter vector from an m fit and a weighted t fit."""
        m = np.asarray(data_m, dtype=float)
        ns, nb = mfit.params[0], mfit.params[1]
        phi_vals = []
        off = 2
        # free shape params appear after the yields in the m-fit vector, in
        # component order; map them through phi_free
        fitted = {}
        if mfit.model is not None:
            for ci, comp in enumerate(mfit.model.components):
                if comp.free_shape:
                    fitted["s" if ci == 0 else "b"] = comp.density.params
        for comp, idx in self.phi_free:
            phi_vals.append(fitted[comp][idx])
        _, _, gs, gb, _, _ = self.unpack(
            np.concatenate([[ns, nb], phi_vals, np.zeros(3), np.zeros(self.n_theta)]))
        s = gs.pdf(m)
        b = gb.pdf(m)
        f = ns * s + nb * b
        Wv = np.array([np.sum(s * s / f ** 2), np.sum(s * b / f ** 2),
                       np.sum(b * b / f ** 2)])
        return np.concatenate([[ns, nb], phi_vals, Wv, tfit.params])

    def weight_s(self, m, lam) -> np.ndarray:
        _, _, gs, gb, Wv, _ = self.unpack(np.asarray(lam, dtype=float))
        wss, wsb, wbb = Wv
        s = gs.pdf(m)
        b = gb.pdf(m)
        num = wbb * s - wsb * b
        den = (wbb - wsb) * s + (wss - wsb) * b
        if np.any(den == 0):
            raise EvaluationError("weight-function denominator is exactly zero")
        return num / den

    def _dphi(self, lam, m):
        """Per-event (N_s dgs/dphi + N_b dgb/dphi) / f; shape (n_phi, N)."""
        lam = np.asarray(lam, dtype=float)
        ns, nb, gs, gb, _, _ = self.unpack(lam)
        f = ns * gs.pdf(m) + nb * gb.pdf(m)
        out = np.empty((self.n_phi, len(m)))
        for k, (comp, idx) in enumerate(self.phi_free):
            dens = gs if comp == "s" else gb
            h = 1e-6 * max(abs(dens.params[idx]), 1.0)
            pp, pm = dens.params.copy(), dens.params.copy()
            pp[idx] += h
            pm[idx] -= h
            dg = (dens.with_params(pp).pdf(m) - dens.with_params(pm).pdf(m)) / (2 * h)
            out[k] = (ns if comp == "s" else nb) * dg / f
        return out

    def score(self, lam, m, t) -> np.ndarray:
        """The quasi-score vector S(lambda) summed over the sample."""
        lam = np.asarray(lam, dtype=float)
        m = np.asarray(m, dtype=float)
        t = np.asarray(t, dtype=float)
        ns, nb, gs, gb, Wv, theta = self.unpack(lam)
        s = gs.pdf(m)
        b = gb.pdf(m)
        f = ns * s + nb * b
        if np.any(f <= 0):
            raise EvaluationError("mixture density non-positive at a data point")
        S = np.empty(self.dim)
        S[0] = np.sum(s / f) - 1.0
        S[1] = np.sum(b / f) - 1.0
        if self.n_phi:
            S[2:2 + self.n_phi] = self._dphi(lam, m).sum(axis=1)
        iw = 2 + self.n_phi
        S[iw + 0] = np.sum(s * s / f ** 2) - Wv[0]
        S[iw + 1] = np.sum(s * b / f ** 2) - Wv[1]
        S[iw + 2] = np.sum(b * b / f ** 2) - Wv[2]
        w = self.weight_s(m, lam)
        d1 = _log_derivs1(self.hs.with_params(theta), t, np.asarray(theta, dtype=float))
        S[iw + 3:] = d1 @ w
        return S

    def score_covariance(self, lam, m, t) -> np.ndarray:
        """Sample estimate of E[S S^T] under Poisson sample-size fluctuations."""
        lam = np.asarray(lam, dtype=float)
        m = np.asarray(m, dtype=float)
        t = np.asarray(t, dtype=float)
        ns, nb, gs, gb, Wv, theta = self.unpack(lam)
        s = gs.pdf(m)
        b = gb.pdf(m)
        f = ns * s + nb * b
        w = self.weight_s(m, lam)
        d1 = _log_derivs1(self.hs.with_params(theta), t, np.asarray(theta, dtype=float))
        rows = [s / f, b / f]
        if self.n_phi:
            rows.extend(self._dphi(lam, m))
        rows.extend([s * s / f ** 2, s * b / f ** 2, b * b / f ** 2])
        rows.extend(w * d1k for d1k in d1)
        V = np.stack(rows)                 # (dim, N)
        return V @ V.T


def corrected_covariance_full(data, spec: QuasiScoreSpec, lam_hat,
                              ) -> CorrectedCovariance:
    """Sandwich covariance over the joint quasi-score.

    ``lam_hat`` must be a root of the score (each component below
    1e-4 per event); the Jacobian is obtained by central differences of the
    analytic score components.
    """
    data = np.asarray(data, dtype=float)
    m, t = data[:, 0], data[:, 1]
    n = len(m)
    lam = np.asarray(lam_hat, dtype=float)
    if len(lam) != spec.dim:
        raise EvaluationError(f"lambda has length {len(lam)}, expected {spec.dim}")

    S = spec.score(lam, m, t)
    tol = ROOT_TOL_PER_EVENT * max(n, 1)
    if np.max(np.abs(S)) > tol:
        raise EvaluationError(
            f"lambda is not a root of the quasi-score: max |S_j| = {np.max(np.abs(S)):.3g}"
            f" exceeds {tol:.3g}")

    dim = spec.dim
    # FD steps must stay small relative to each block's own scale; the W
    # block shrinks like 1/N, so the usual max(|x|, 1) floor would swamp it
    scales = np.maximum(np.abs(lam), 1.0)
    iw = 2 + spec.n_phi
    w_scale = float(np.max(np.abs(lam[iw:iw + 3])))
    if w_scale > 0:
        scales[iw:iw + 3] = np.maximum(np.abs(lam[iw:iw + 3]), w_scale)
    J = np.empty((dim, dim))
    for j in range(dim):
        h = JACOBIAN_REL_STEP * scales[j]
        lp, lm = lam.copy(), lam.copy()
        lp[j] += h
        lm[j] -= h
        J[:, j] = (spec.score(lp, m, t) - spec.score(lm, m, t)) / (2 * h)

    CS = spec.score_covariance(lam, m, t)
    try:
        X = np.linalg.solve(J, CS)
        C = np.linalg.solve(J, X.T).T
    except np.linalg.LinAlgError as exc:
        raise EvaluationError("score Jacobian is singular") from exc
    C = 0.5 * (C + C.T)

    ith = slice(2 + spec.n_phi + 3, dim)
    theta_block = C[ith, ith]
    theta = lam[ith]
    w = spec.weight_s(m, lam)
    naive = _naive_covariance(spec.hs.with_params(theta), t, w, theta)
    return CorrectedCovariance(theta_block=theta_block, naive=naive, full=C)
