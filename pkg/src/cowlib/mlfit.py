"""Extended and weighted unbinned maximum-likelihood fitting.

The optimizer is a bounded quasi-Newton (scipy L-BFGS-B) followed by a Newton
polish that drives the score to zero well below the convergence tolerance,
so identities that hold exactly at the optimum (e.g. the extended-ML yield
identity) are reproduced to near machine precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from .densities import Density1D, EfficiencyMap, Interval
from .errors import ConstructionError, EvaluationError

# failure modes of a numerical Hessian at (or probing past) a bound
_HESSIAN_ERRORS = (np.linalg.LinAlgError, EvaluationError, ConstructionError)

__all__ = [
    "MixtureComponent",
    "MixtureModel",
    "FitResult",
    "fit_extended_ml",
    "fit_weighted_ml",
    "yields_only_refit",
    "numerical_hessian",
]

GRAD_TOL_PER_EVENT = 1e-6  # converged when |score| < tol * max(N, 1)


@dataclass
class MixtureComponent:
    label: str
    density: Density1D
    free_shape: bool = False


@dataclass
class MixtureModel:
    """Ordered mixture of 1-D components with extended (yield) normalization."""

    components: List[MixtureComponent]
    yields: np.ndarray
    efficiency: Optional[EfficiencyMap] = None

    def __post_init__(self):
        self.yields = np.atleast_1d(np.asarray(self.yields, dtype=float))
        if len(self.yields) != len(self.components):
            raise ConstructionError("one yield per component required")
        if np.any(self.yields < 0):
            raise ConstructionError("yields must be >= 0")
        supports = {c.density.support.as_tuple() for c in self.components}
        if len(supports) != 1:
            raise ConstructionError("all components must share one support")

    @property
    def support(self) -> Interval:
        return self.components[0].density.support

    @property
    def fractions(self) -> np.ndarray:
        return self.yields / self.yields.sum()

    def densities(self) -> List[Density1D]:
        return [c.density for c in self.components]

    def pdf(self, x) -> np.ndarray:
        """Normalized mixture density at the current yields."""
        z = self.fractions
        return sum(zk * c.density.pdf(x) for zk, c in zip(z, self.components))

    def replace(self, yields=None, shape_params: Optional[Sequence] = None) -> "MixtureModel":
        """Copy with new yields and/or per-component shape parameter vectors."""
        comps = []
        for i, c in enumerate(self.components):
            dens = c.density
            if shape_params is not None and shape_params[i] is not None:
                dens = dens.with_params(shape_params[i])
            comps.append(MixtureComponent(c.label, dens, c.free_shape))
        y = self.yields if yields is None else yields
        return MixtureModel(comps, np.asarray(y, dtype=float), self.efficiency)

    def fix_shapes(self) -> "MixtureModel":
        comps = [MixtureComponent(c.label, c.density, False) for c in self.components]
        return MixtureModel(comps, self.yields.copy(), self.efficiency)


@dataclass
class FitResult:
    """Result of an unbinned ML fit.

    ``hessian`` is the Hessian of the log-likelihood at the optimum, so
    ``covariance`` equals the negative inverse Hessian when it exists.
    """

    params: np.ndarray
    covariance: Optional[np.ndarray]
    hessian: Optional[np.ndarray]
    nll: float
    converged: bool
    n_calls: int
    param_names: List[str] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)
    model: Optional[MixtureModel] = None

    def to_dict(self) -> dict:
        return {
            "params": np.asarray(self.params).tolist(),
            "param_names": list(self.param_names),
            "cov": None if self.covariance is None else np.asarray(self.covariance).tolist(),
            "hessian": None if self.hessian is None else np.asarray(self.hessian).tolist(),
            "nll": float(self.nll),
            "converged": bool(self.converged),
            "n_calls": int(self.n_calls),
            "flags": list(self.flags),
        }


def numerical_hessian(objective, params, rel_step: float = 1e-5) -> np.ndarray:
    """Central-difference Hessian, symmetrized by averaging with its transpose.

    Steps are scaled per parameter by ``max(|p|, 1)``.  Raises
    :class:`~cowlib.errors.EvaluationError` naming the probe point if the
    objective is non-finite anywhere on the stencil.
    """
    x = np.asarray(params, dtype=float)
    n = len(x)
    steps = rel_step * np.maximum(np.abs(x), 1.0)

    def f(p):
        v = float(objective(p))
        if not np.isfinite(v):
            raise EvaluationError(f"objective non-finite at probe point {p.tolist()}")
        return v

    f0 = f(x)
    H = np.empty((n, n))
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = steps[i]
        H[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / steps[i] ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = steps[j]
            H[i, j] = H[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4.0 * steps[i] * steps[j])
    return 0.5 * (H + H.T)


def _projected_grad(g, x, lower, upper):
    g = g.copy()
    at_lo = (x <= lower + 1e-12) & (g > 0)
    at_hi = (x >= upper - 1e-12) & (g < 0)
    g[at_lo] = 0.0
    g[at_hi] = 0.0
    return g


def _polish_newton(nll, grad, x, lower, upper, gtol, max_iter=40):
    """Newton iterations on the score; clips steps to the bounds."""
    fx = nll(x)
    for _ in range(max_iter):
        g = grad(x)
        if np.max(np.abs(_projected_grad(g, x, lower, upper))) < gtol:
            break
        try:
            H = numerical_hessian(nll, x)
            step = -np.linalg.solve(H, g)
        except _HESSIAN_ERRORS:
            break
        scale = 1.0
        improved = False
        for _ in range(20):
            xn = np.clip(x + scale * step, lower, upper)
            fn = nll(xn)
            if np.isfinite(fn) and fn <= fx + 1e-12 * max(1.0, abs(fx)):
                x, fx = xn, fn
                improved = True
                break
            scale *= 0.5
        if not improved or np.max(np.abs(scale * step)) < 1e-12:
            break
    return x


def _run_fit(nll, grad, x0, lower, upper, gtol):
    calls = [0]

    def counted(p):
        calls[0] += 1
        return nll(p)

    bounds = list(zip(lower, upper))
    x = np.asarray(x0, dtype=float)
    converged = False
    # L-BFGS-B occasionally stalls short of the optimum on a stale curvature
    # estimate; a fresh start from the stalled point recovers it
    for _ in range(2):
        res = minimize(counted, x, jac=grad, method="L-BFGS-B", bounds=bounds,
                       options={"ftol": 1e-14, "gtol": 1e-10, "maxiter": 1000})
        x = _polish_newton(counted, grad, res.x, lower, upper, gtol)
        g = _projected_grad(grad(x), x, lower, upper)
        converged = bool(np.max(np.abs(g)) < gtol)
        if converged:
            break
    return x, counted(x), converged, calls[0], counted


def _shape_param_layout(model: MixtureModel):
    """Indices of free shape parameters: list of (component index, n_params)."""
    layout = []
    for i, c in enumerate(model.components):
        if c.free_shape:
            layout.append((i, c.density.n_params))
    return layout


def _model_at(model: MixtureModel, params: np.ndarray) -> MixtureModel:
    n = len(model.components)
    yields = params[:n]
    shape_params = [None] * n
    off = n
    for i, npar in _shape_param_layout(model):
        shape_params[i] = params[off:off + npar]
        off += npar
    return model.replace(yields=yields, shape_params=shape_params)


def _param_names(model: MixtureModel):
    names = [f"N_{c.label}" for c in model.components]
    for i, npar in _shape_param_layout(model):
        label = model.components[i].label
        names.extend(f"{label}_p{j}" for j in range(npar))
    return names


def _default_shape_bounds(density: Density1D):
    if density.kind == "normal":
        lo, hi = density.support.as_tuple()
        width = hi - lo
        return [(lo - width, hi + width), (1e-4 * width, 10 * width)]
    return [(-np.inf, np.inf)] * density.n_params


def fit_extended_ml(data_m, model: MixtureModel, init=None, bounds=None) -> FitResult:
    """Maximize the extended log-likelihood over yields and free shape params.

    Constant terms of the likelihood are dropped.  At the optimum the yield
    scores vanish, which implies sum(yields) == len(data) when all shapes are
    fixed.
    """
    data = np.asarray(data_m, dtype=float)
    sup = model.support
    if np.any(~sup.contains(data)):
        raise EvaluationError("data outside the model support")
    n_comp = len(model.components)
    layout = _shape_param_layout(model)
    n_shape = sum(npar for _, npar in layout)
    n_par = n_comp + n_shape

    if init is None:
        y0 = np.full(n_comp, len(data) / n_comp)
        init = np.concatenate([y0] + [model.components[i].density.params for i, _ in layout])
    init = np.asarray(init, dtype=float)
    if bounds is None:
        bounds = [(0.0, np.inf)] * n_comp
        for i, _ in layout:
            bounds.extend(_default_shape_bounds(model.components[i].density))
    lower = np.array([b[0] for b in bounds])
    upper = np.array([b[1] for b in bounds])
    if np.any(init < lower) or np.any(init > upper):
        raise EvaluationError("init outside bounds")

    def densities_at(params):
        m = _model_at(model, params)
        return [c.density for c in m.components]

    def comp_values(params):
        dens = densities_at(params)
        return np.stack([d.pdf(data) for d in dens])  # (n_comp, N)

    def nll(params):
        # shape proposals inside the box bounds can still be infeasible
        # (e.g. a truncated density with vanishing mass on the support);
        # treat them as a flat plateau the line search backs away from
        try:
            g = comp_values(params)
        except ConstructionError:
            return 1e100
        f = params[:n_comp] @ g
        if np.any(f <= 0):
            return 1e100
        return float(np.sum(params[:n_comp]) - np.sum(np.log(f)))

    def grad(params):
        try:
            g = comp_values(params)
        except ConstructionError:
            return np.zeros(n_par)
        f = params[:n_comp] @ g
        f = np.maximum(f, 1e-300)
        out = np.empty(n_par)
        out[:n_comp] = 1.0 - g @ (1.0 / f)
        off = n_comp
        for i, npar in layout:
            for j in range(npar):
                h = 1e-6 * max(abs(params[off]), 1.0)
                pp, pm = params.copy(), params.copy()
                pp[off] += h
                pm[off] -= h
                try:
                    dgi = (densities_at(pp)[i].pdf(data)
                           - densities_at(pm)[i].pdf(data)) / (2 * h)
                    out[off] = -np.sum(params[i] * dgi / f)
                except ConstructionError:
                    out[off] = 0.0
                off += 1
        return out

    def polish_yields(params):
        """Newton on the yield scores at fixed shapes, to machine precision.

        The yield block has an analytic score and Hessian, so identities
        that hold exactly at the optimum (sum of yields = N, and the
        weight-sum identities downstream) are reproduced far below the
        optimizer tolerance.
        """
        p = params.copy()
        g = comp_values(p)
        best = np.inf
        for _ in range(50):
            y = p[:n_comp]
            f = y @ g
            if np.any(f <= 0):
                break
            S = g @ (1.0 / f) - 1.0
            worst = np.max(np.abs(S))
            if worst >= best or worst < 1e-14:
                break
            best = worst
            J = -(g / f ** 2) @ g.T
            try:
                step = np.linalg.solve(J, -S)
            except np.linalg.LinAlgError:
                break
            y_new = y + step
            if np.any(y_new < 0):
                break
            p[:n_comp] = y_new
        return p

    gtol = GRAD_TOL_PER_EVENT * max(len(data), 1.0)
    x, fval, converged, n_calls, counted = _run_fit(nll, grad, init, lower, upper, gtol)
    if converged and np.all(x[:n_comp] > 0):
        x = polish_yields(x)
        fval = counted(x)

    flags = []
    cov = hess = None
    if converged:
        try:
            H_nll = numerical_hessian(counted, x)
            hess = -H_nll
            cov = np.linalg.inv(H_nll)
            cov = 0.5 * (cov + cov.T)
            if not np.all(np.isfinite(cov)) or np.any(np.diag(cov) <= 0):
                flags.append("hessian_singular")
                cov = None
        except _HESSIAN_ERRORS:
            flags.append("hessian_singular")
            cov = hess = None
    else:
        flags.append("not_converged")

    return FitResult(params=x, covariance=cov, hessian=hess, nll=fval,
                     converged=converged, n_calls=n_calls,
                     param_names=_param_names(model), flags=flags,
                     model=_model_at(model, x))


def yields_only_refit(data_m, model: MixtureModel, init=None) -> FitResult:
    """Extended-ML fit with every shape fixed at its current value."""
    fixed = model.fix_shapes()
    if init is not None:
        init = np.asarray(init, dtype=float)
    return fit_extended_ml(data_m, fixed, init=init)


def fit_weighted_ml(data_t, weights, density: Density1D, init=None, bounds=None) -> FitResult:
    """Solve the weighted score equations for the shape parameters of ``density``.

    Weights may be negative (sWeights are).  The covariance field holds the
    naive inverse Hessian of the weighted likelihood, which is *not* a valid
    covariance for weighted data; use the wcov module to correct it.
    """
    t = np.asarray(data_t, dtype=float)
    w = np.asarray(weights, dtype=float)
    if t.shape != w.shape:
        raise EvaluationError("data and weights must have equal length")
    if not np.all(np.isfinite(w)):
        raise EvaluationError("weights must be finite")
    if w.sum() <= 0:
        raise EvaluationError("sum of weights must be positive")
    active = w != 0
    if np.any(density.pdf(t[active]) <= 0):
        i = int(np.where(active & (density.pdf(t) <= 0))[0][0])
        raise EvaluationError(f"density non-positive at weighted observation index {i}")

    n_par = density.n_params
    if init is None:
        init = density.params.copy()
    init = np.asarray(init, dtype=float)
    if bounds is None:
        bounds = _default_shape_bounds(density)
    lower = np.array([b[0] for b in bounds])
    upper = np.array([b[1] for b in bounds])

    def nll(theta):
        try:
            p = density.with_params(theta).pdf(t)
        except ConstructionError:
            return 1e100
        if np.any(p[active] <= 0):
            return 1e100
        logp = np.where(active, np.log(np.where(p > 0, p, 1.0)), 0.0)
        return float(-np.sum(w * logp))

    def grad(theta):
        out = np.empty(n_par)
        for j in range(n_par):
            h = 1e-6 * max(abs(theta[j]), 1.0)
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            try:
                lp = density.with_params(tp).logpdf(t)
                lm = density.with_params(tm).logpdf(t)
            except ConstructionError:
                out[j] = 0.0
                continue
            d = np.where(active, (lp - lm) / (2 * h), 0.0)
            out[j] = -np.sum(w * d)
        return out

    # score scales with sum|w|; point estimate is scale-invariant
    gtol = GRAD_TOL_PER_EVENT * max(np.sum(np.abs(w)), 1.0)
    x, fval, converged, n_calls, counted = _run_fit(nll, grad, init, lower, upper, gtol)

    flags = []
    cov = hess = None
    if converged:
        try:
            H_nll = numerical_hessian(counted, x)
            hess = -H_nll
            cov = np.linalg.inv(H_nll)
            cov = 0.5 * (cov + cov.T)
        except _HESSIAN_ERRORS:
            flags.append("hessian_singular")
            cov = hess = None
    else:
        flags.append("not_converged")

    names = [f"theta_{j}" for j in range(n_par)]
    return FitResult(params=x, covariance=cov, hessian=hess, nll=fval,
                     converged=converged, n_calls=n_calls,
                     param_names=names, flags=flags)
