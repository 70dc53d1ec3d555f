"""Seeded pseudo-experiment generators and the ensemble runner.

Three study setups are provided: a simple factorising two-component model, a
three-component model with a discrete label and two 2-D control variables,
and a non-factorising background with a non-factorising efficiency.  The RNG
is the counter-based Philox generator; toy i of an ensemble uses the stream
keyed by base_seed + i, so ensembles are reproducible and trivially
parallel.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import cows, sweights, wcov
from .densities import (Density1D, EfficiencyMap, Interval, UNIT_EFFICIENCY,
                        monomial_basis)
from .errors import CowlibError, ConstructionError, EvaluationError
from .mlfit import (FitResult, MixtureComponent, MixtureModel,
                    fit_extended_ml, fit_weighted_ml, yields_only_refit)

__all__ = [
    "ToySpec",
    "ToyDataset",
    "MethodSpec",
    "EnsembleConfig",
    "EnsembleReport",
    "generate_simple",
    "generate_multicomponent",
    "generate_nonfactorising",
    "run_ensemble",
    "M_SUPPORT",
    "T_SUPPORT",
    "TRUE_SLOPE",
]

M_SUPPORT = Interval(0.0, 1.0)
T_SUPPORT = Interval(0.0, 3.0)
TRUE_SLOPE = 2.0

# simple-study truth: signal peaks in m and falls exponentially in t,
# background falls exponentially in m and is normal in t
SIMPLE_TRUTH = {
    "sig_m": ("normal", [0.5, 0.08]),
    "bkg_m": ("exponential", [1.0]),
    "sig_t": ("exponential", [TRUE_SLOPE]),
    "bkg_t": ("normal", [1.5, 0.5]),
}

# couplings of the non-factorising study; zeros reduce it to the simple one
NONFACT_DEFAULTS = {
    "bkg_slope_t": 0.8,     # background slope in m grows with t
    "bkg_mean_m": 0.8,      # background t mean drifts with m
    "bkg_width_m": -0.2,    # background t width shrinks with m
    "eff_base": 0.3,
    "eff_m": 0.25,
    "eff_t": 0.15,
    "eff_mt": 0.25,         # cross term; breaks efficiency factorisation
}

MULTI_TRUTH = {
    "fractions": [0.3, 0.3, 0.4],
    "m": [("normal", [0.35, 0.06]), ("normal", [0.5, 0.10]), ("exponential", [1.5])],
    # (u, v) are flat except for one band per labelled component
    "band_u": ("normal", [0.6, 0.07]),   # component 0
    "band_v": ("normal", [0.4, 0.07]),   # component 1
}


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & (2 ** 64 - 1)))


def _density(kind_params, support) -> Density1D:
    kind, params = kind_params
    return Density1D(kind, params, support)


@dataclass
class ToySpec:
    """Configuration of one pseudo-experiment."""

    study: str
    n_events: int
    z: float = 0.2
    fractions: Optional[Sequence[float]] = None
    efficiency: bool = False
    seed: int = 0
    params: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.study not in ("simple", "multicomponent", "nonfactorising"):
            raise ConstructionError(f"unknown study {self.study!r}")
        if self.n_events < 1:
            raise ConstructionError("n_events must be >= 1")
        if self.fractions is not None:
            f = np.asarray(self.fractions, dtype=float)
            if np.any(f < 0) or abs(f.sum() - 1.0) > 1e-9:
                raise ConstructionError("fractions must be >= 0 and sum to 1")
        elif not 0.0 <= self.z <= 1.0:
            raise ConstructionError("z must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["fractions"] is not None:
            d["fractions"] = list(np.asarray(d["fractions"], dtype=float))
        return d


@dataclass
class ToyDataset:
    """Generated sample: columns array, column names and true labels."""

    data: np.ndarray
    columns: List[str]
    labels: np.ndarray
    efficiency: Optional[EfficiencyMap] = None
    truth: Dict = field(default_factory=dict)

    @property
    def m(self) -> np.ndarray:
        return self.data[:, 0]

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.columns.index(name)]


def simple_truth_densities():
    gs = _density(SIMPLE_TRUTH["sig_m"], M_SUPPORT)
    gb = _density(SIMPLE_TRUTH["bkg_m"], M_SUPPORT)
    hs = _density(SIMPLE_TRUTH["sig_t"], T_SUPPORT)
    hb = _density(SIMPLE_TRUTH["bkg_t"], T_SUPPORT)
    return gs, gb, hs, hb


def generate_simple(spec: ToySpec) -> ToyDataset:
    """Sample the factorising two-component model by inverse transforms."""
    rng = _rng(spec.seed)
    gs, gb, hs, hb = simple_truth_densities()
    n = spec.n_events
    is_sig = rng.random(n) < spec.z
    m = np.empty(n)
    t = np.empty(n)
    u_m = rng.random(n)
    u_t = rng.random(n)
    m[is_sig] = gs.ppf(u_m[is_sig])
    m[~is_sig] = gb.ppf(u_m[~is_sig])
    t[is_sig] = hs.ppf(u_t[is_sig])
    t[~is_sig] = hb.ppf(u_t[~is_sig])
    truth = {"z": spec.z, "gs": gs, "gb": gb, "hs": hs, "hb": hb,
             "slope": TRUE_SLOPE}
    return ToyDataset(np.column_stack([m, t]), ["m", "t"],
                      np.where(is_sig, 0, 1), truth=truth)


def generate_multicomponent(spec: ToySpec) -> ToyDataset:
    """Three components in m with a label and two bounded control variables."""
    rng = _rng(spec.seed)
    fr = np.asarray(spec.fractions if spec.fractions is not None
                    else MULTI_TRUTH["fractions"], dtype=float)
    if len(fr) != 3:
        raise ConstructionError("multicomponent study uses 3 fractions")
    dens_m = [_density(kp, M_SUPPORT) for kp in MULTI_TRUTH["m"]]
    uv_support = Interval(0.0, 1.0)
    band_u = _density(MULTI_TRUTH["band_u"], uv_support)
    band_v = _density(MULTI_TRUTH["band_v"], uv_support)
    flat = _density(("uniform", []), uv_support)

    n = spec.n_events
    c = rng.choice(3, size=n, p=fr)
    m = np.empty(n)
    u = np.empty(n)
    v = np.empty(n)
    ru = rng.random((3, n))
    for k in range(3):
        sel = c == k
        m[sel] = dens_m[k].ppf(ru[0, sel])
        du = band_u if k == 0 else flat
        dv = band_v if k == 1 else flat
        u[sel] = du.ppf(ru[1, sel])
        v[sel] = dv.ppf(ru[2, sel])
    truth = {"fractions": fr, "densities_m": dens_m}
    return ToyDataset(np.column_stack([m, c.astype(float), u, v]),
                      ["m", "c", "u", "v"], c, truth=truth)


class _NonfactTruth:
    """Closed-form truth of the non-factorising study."""

    def __init__(self, params: Dict[str, float]):
        p = dict(NONFACT_DEFAULTS)
        p.update(params)
        self.p = p
        self.gs, _, self.hs, _ = simple_truth_densities()
        self.lam0 = SIMPLE_TRUTH["bkg_m"][1][0]
        self.mu0 = SIMPLE_TRUTH["bkg_t"][1][0]
        self.sig0 = SIMPLE_TRUTH["bkg_t"][1][1]
        self._bkg_norm = self._compute_bkg_norm()

    def bkg_unnorm(self, m, t):
        p = self.p
        lam = self.lam0 + p["bkg_slope_t"] * t
        mu = self.mu0 + p["bkg_mean_m"] * m
        sig = self.sig0 + p["bkg_width_m"] * m
        return np.exp(-lam * m) * np.exp(-0.5 * ((t - mu) / sig) ** 2)

    def _compute_bkg_norm(self) -> float:
        xm, wm = np.polynomial.legendre.leggauss(120)
        xt, wt = np.polynomial.legendre.leggauss(120)
        mg = 0.5 * (M_SUPPORT.lo + M_SUPPORT.hi) + 0.5 * M_SUPPORT.width * xm
        tg = 0.5 * (T_SUPPORT.lo + T_SUPPORT.hi) + 0.5 * T_SUPPORT.width * xt
        M, T = np.meshgrid(mg, tg, indexing="ij")
        vals = self.bkg_unnorm(M, T)
        w2d = np.outer(wm, wt) * (0.25 * M_SUPPORT.width * T_SUPPORT.width)
        return float(np.sum(vals * w2d))

    def f_bkg(self, m, t):
        return self.bkg_unnorm(m, t) / self._bkg_norm

    def f_sig(self, m, t):
        return self.gs.pdf(m) * self.hs.pdf(t)

    def f_total(self, m, t, z):
        return z * self.f_sig(m, t) + (1.0 - z) * self.f_bkg(m, t)

    def eff(self, m, t):
        p = self.p
        tau = (np.asarray(t, dtype=float) - T_SUPPORT.lo) / T_SUPPORT.width
        return (p["eff_base"] + p["eff_m"] * np.asarray(m, dtype=float)
                + p["eff_t"] * tau + p["eff_mt"] * np.asarray(m, dtype=float) * tau)


def _grid_max(fn, n=201) -> float:
    """Maximum of fn over the (m, t) rectangle, refined around the coarse peak."""
    mg = np.linspace(M_SUPPORT.lo, M_SUPPORT.hi, n)
    tg = np.linspace(T_SUPPORT.lo, T_SUPPORT.hi, n)
    M, T = np.meshgrid(mg, tg, indexing="ij")
    V = fn(M, T)
    i, j = np.unravel_index(np.argmax(V), V.shape)
    best = V[i, j]
    dm = (mg[1] - mg[0])
    dt = (tg[1] - tg[0])
    for _ in range(3):
        mg2 = np.clip(np.linspace(mg[i] - dm, mg[i] + dm, 41), M_SUPPORT.lo, M_SUPPORT.hi)
        tg2 = np.clip(np.linspace(tg[j] - dt, tg[j] + dt, 41), T_SUPPORT.lo, T_SUPPORT.hi)
        M2, T2 = np.meshgrid(mg2, tg2, indexing="ij")
        V2 = fn(M2, T2)
        i2, j2 = np.unravel_index(np.argmax(V2), V2.shape)
        best = max(best, V2[i2, j2])
        mg, tg, i, j = mg2, tg2, i2, j2
        dm /= 10
        dt /= 10
    return float(best)


def _accept_reject_2d(rng, fn, n, envelope) -> Tuple[np.ndarray, np.ndarray]:
    """Sample n points from the unnormalized 2-D density fn on the rectangle."""
    out_m = np.empty(0)
    out_t = np.empty(0)
    while len(out_m) < n:
        batch = max(2 * (n - len(out_m)), 1000)
        m = M_SUPPORT.lo + M_SUPPORT.width * rng.random(batch)
        t = T_SUPPORT.lo + T_SUPPORT.width * rng.random(batch)
        vals = fn(m, t)
        if np.any(vals > envelope):
            raise EvaluationError("accept-reject envelope violated (internal bug)")
        keep = rng.random(batch) * envelope < vals
        out_m = np.concatenate([out_m, m[keep]])
        out_t = np.concatenate([out_t, t[keep]])
    return out_m[:n], out_t[:n]


def generate_nonfactorising(spec: ToySpec) -> ToyDataset:
    """Coupled background plus a smooth non-factorising efficiency.

    The returned dataset carries the exact efficiency map used and the truth
    callables, so tests can integrate the generator density directly.
    """
    rng = _rng(spec.seed)
    truth = _NonfactTruth(spec.params)
    z = spec.z
    use_eff = spec.efficiency

    def eff(m, t):
        if use_eff:
            return truth.eff(m, t)
        return np.ones_like(np.asarray(m, dtype=float))

    # observed per-component normalizations under the efficiency
    xm, wm = np.polynomial.legendre.leggauss(80)
    xt, wt = np.polynomial.legendre.leggauss(80)
    mg = 0.5 * (M_SUPPORT.lo + M_SUPPORT.hi) + 0.5 * M_SUPPORT.width * xm
    tg = 0.5 * (T_SUPPORT.lo + T_SUPPORT.hi) + 0.5 * T_SUPPORT.width * xt
    M, T = np.meshgrid(mg, tg, indexing="ij")
    w2d = np.outer(wm, wt) * (0.25 * M_SUPPORT.width * T_SUPPORT.width)
    det_sig = float(np.sum(eff(M, T) * truth.f_sig(M, T) * w2d))
    det_bkg = float(np.sum(eff(M, T) * truth.f_bkg(M, T) * w2d))
    z_obs = z * det_sig / (z * det_sig + (1 - z) * det_bkg)

    n = spec.n_events
    is_sig = rng.random(n) < z_obs
    n_sig = int(np.sum(is_sig))

    def rho_sig(m, t):
        return eff(m, t) * truth.f_sig(m, t)

    def rho_bkg(m, t):
        return eff(m, t) * truth.f_bkg(m, t)

    env_sig = 1.2 * _grid_max(rho_sig)
    env_bkg = 1.2 * _grid_max(rho_bkg)
    m = np.empty(n)
    t = np.empty(n)
    m[is_sig], t[is_sig] = _accept_reject_2d(rng, rho_sig, n_sig, env_sig)
    m[~is_sig], t[~is_sig] = _accept_reject_2d(rng, rho_bkg, n - n_sig, env_bkg)

    eff_map = (EfficiencyMap.from_function(truth.eff, tag="nonfactorising")
               if use_eff else None)
    D = z * det_sig + (1 - z) * det_bkg
    info = {"z": z, "z_obs": z_obs, "slope": TRUE_SLOPE, "gs": truth.gs,
            "hs": truth.hs, "f_sig": truth.f_sig, "f_bkg": truth.f_bkg,
            "eff": eff, "D": D, "nonfact": truth}
    return ToyDataset(np.column_stack([m, t]), ["m", "t"],
                      np.where(is_sig, 0, 1), efficiency=eff_map, truth=info)


def generate(spec: ToySpec) -> ToyDataset:
    if spec.study == "simple":
        return generate_simple(spec)
    if spec.study == "multicomponent":
        return generate_multicomponent(spec)
    return generate_nonfactorising(spec)


# ---------------------------------------------------------------------------
# ensemble runner


@dataclass
class MethodSpec:
    """One weight-extraction recipe to run per toy.

    ``kind`` selects classic two-component weights ("sweights") or the
    generalized construction ("cow").  For cows, ``poly_order`` > 0 expands
    the background over monomial densities of that order; 0 keeps the fitted
    background shape.  ``correction`` picks the covariance treatment of the
    weighted control-variable fit.
    """

    name: str
    kind: str = "sweights"
    variant: str = "B"              # sweights: A | B | Ci | Cii
    variance: str = "mixture"       # cow: unity | qm | mixture
    qm_bins: int = 50
    poly_order: int = 0
    fit_shapes: bool = False
    correction: str = "fixed"       # fixed | sandwich | none

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EnsembleConfig:
    toy: ToySpec
    methods: List[MethodSpec]
    n_toys: int
    base_seed: int = 0
    jobs: int = 1

    def to_dict(self) -> dict:
        return {"toy": self.toy.to_dict(),
                "methods": [m.to_dict() for m in self.methods],
                "n_toys": self.n_toys, "base_seed": self.base_seed,
                "jobs": self.jobs}


MAX_FAILURE_FRACTION = 0.10


@dataclass
class EnsembleReport:
    config: dict
    seeds: List[int]
    records: List[dict]
    aggregates: Dict[str, dict]
    n_failed: int
    valid: bool

    def to_dict(self) -> dict:
        return {"config": self.config, "seeds": self.seeds,
                "records": self.records, "aggregates": self.aggregates,
                "n_failed": self.n_failed, "valid": self.valid}


def _fit_models(ds: ToyDataset, need_free: bool, need_yields_only: bool):
    """Extended-ML fits of the m distribution; shapes from the simple truth."""
    gs, gb, _, _ = simple_truth_densities()
    m = ds.m
    n = len(m)
    out = {}
    if need_free:
        model = MixtureModel(
            [MixtureComponent("s", gs, True), MixtureComponent("b", gb, True)],
            np.array([0.5 * n, 0.5 * n]))
        out["free"] = fit_extended_ml(m, model)
    if need_yields_only:
        model = MixtureModel(
            [MixtureComponent("s", gs, False), MixtureComponent("b", gb, False)],
            np.array([0.5 * n, 0.5 * n]))
        out["yields_only"] = fit_extended_ml(m, model)
    return out


def _hs_template() -> Density1D:
    return Density1D("exponential", [1.5], T_SUPPORT)


def _run_method(method: MethodSpec, ds: ToyDataset, fits: dict) -> dict:
    m, t = ds.m, ds.column("t")
    n = len(m)
    data = np.column_stack([m, t])
    eff = ds.efficiency
    truth_slope = ds.truth.get("slope", TRUE_SLOPE)

    fit = fits["free"] if method.fit_shapes else fits["yields_only"]
    if not fit.converged:
        raise EvaluationError("m fit did not converge")
    gs_hat = fit.model.components[0].density
    gb_hat = fit.model.components[1].density
    yields = fit.params[:2]
    z_hat = float(yields[0] / yields.sum())

    dW = None
    if method.kind == "sweights":
        # classic weights ignore any efficiency map on purpose: running them
        # on an efficiency-distorted sample exposes the resulting bias
        if method.variant == "A":
            wm = sweights.compute_W_variant_A(gs_hat, gb_hat, z_hat, gs_hat.support)
        elif method.variant == "B":
            wm = sweights.compute_W_variant_B(gs_hat, gb_hat, z_hat, m)
        elif method.variant == "Ci":
            wm = sweights.compute_W_variant_C(fits["free"], n, "invert-full-cov")
        elif method.variant == "Cii":
            yfit = fits.get("yields_only")
            if yfit is None:
                yfit = yields_only_refit(m, fits["free"].model)
            wm = sweights.compute_W_variant_C(yfit, n, "yields-only-cov")
        else:
            raise ConstructionError(f"unknown variant {method.variant!r}")
        wfs = sweights.weight_functions(wm, gs_hat, gb_hat)
        w = wfs.w_s(m)
        dW = wfs.dw_s_dW(m)
    elif method.kind == "cow":
        if method.poly_order > 0:
            # a polynomial background of order p spans degrees 0..p
            basis = [gs_hat] + monomial_basis(method.poly_order + 1, gs_hat.support)
        else:
            basis = [gs_hat, gb_hat]
        if method.variance == "unity":
            var = cows.UnityVariance()
        elif method.variance == "qm":
            var = cows.HistogramVariance(
                cows.variance_fn_qm(data, eff or UNIT_EFFICIENCY, method.qm_bins,
                                    support=gs_hat.support))
        elif method.variance == "mixture":
            z_iter, var = cows.variance_fn_ml_iterative(basis, data, eff)
        else:
            raise ConstructionError(f"unknown variance {method.variance!r}")
        spec = cows.CowSpec(basis=basis, variance_fn=var,
                            support=gs_hat.support, n_signal=1, efficiency=eff)
        cow = cows.build_cow(spec)
        w = cows.efficiency_corrected_weights(cow, eff, data)[:, 0]
    else:
        raise ConstructionError(f"unknown method kind {method.kind!r}")

    hs = _hs_template()
    tfit = fit_weighted_ml(t, w, hs, bounds=[(0.05, 20.0)])
    if not tfit.converged:
        raise EvaluationError("weighted t fit did not converge")
    theta = tfit.params

    sigma_naive = float(np.sqrt(tfit.covariance[0, 0])) if tfit.covariance is not None else np.nan
    if method.correction == "none":
        sigma_corr = sigma_naive
    elif method.kind == "cow":
        corr = wcov.corrected_covariance_cow(cow, data, hs, theta, eff=eff)
        sigma_corr = float(np.sqrt(corr.theta_block[0, 0]))
    else:
        use_dw = dW if method.correction == "fixed" else None
        corr = wcov.corrected_covariance_fixed_shapes(
            t, w, use_dw, hs, theta,
            gs=gs_hat, gb=gb_hat, yields=yields, data_m=m)
        sigma_corr = float(np.sqrt(corr.theta_block[0, 0]))

    est = float(theta[0])
    return {
        "ok": True,
        "estimate": est,
        "sigma_corr": sigma_corr,
        "sigma_naive": sigma_naive,
        "pull": (est - truth_slope) / sigma_corr,
        "pull_naive": (est - truth_slope) / sigma_naive if np.isfinite(sigma_naive) else np.nan,
        "sum_w": float(np.sum(w)),
        "sum_w2": float(np.sum(w ** 2)),
        "neq": wcov.equivalent_events(w),
        "covered68": bool(abs(est - truth_slope) <= sigma_corr),
    }


def _fit_summary(fit: Optional[FitResult]) -> Optional[dict]:
    if fit is None:
        return None
    cov = fit.covariance
    return {
        "N_s": float(fit.params[0]),
        "N_b": float(fit.params[1]),
        "sigma_N_s": float(np.sqrt(cov[0, 0])) if cov is not None else np.nan,
        "sigma_N_b": float(np.sqrt(cov[1, 1])) if cov is not None else np.nan,
        "converged": bool(fit.converged),
    }


def run_toy(config: EnsembleConfig, index: int) -> dict:
    """Generate and analyse toy ``index``; pure given (config, index)."""
    seed = config.base_seed + index
    spec = ToySpec(**{**config.toy.to_dict(), "seed": seed})
    record = {"toy": index, "seed": seed, "ok": True, "methods": {}}
    try:
        ds = generate(spec)
        need_free = any(ms.fit_shapes or ms.variant == "Ci" for ms in config.methods)
        need_yonly = any((not ms.fit_shapes) or ms.variant == "Cii" for ms in config.methods)
        fits = _fit_models(ds, need_free, need_yonly)
        record["fit_free"] = _fit_summary(fits.get("free"))
        record["fit_yields_only"] = _fit_summary(fits.get("yields_only"))
        record["n"] = spec.n_events
        for ms in config.methods:
            try:
                record["methods"][ms.name] = _run_method(ms, ds, fits)
            except (CowlibError, np.linalg.LinAlgError) as exc:
                record["methods"][ms.name] = {"ok": False, "error": str(exc)}
        if not all(v.get("ok") for v in record["methods"].values()):
            record["ok"] = False
    except (CowlibError, np.linalg.LinAlgError) as exc:
        record["ok"] = False
        record["error"] = str(exc)
    return record


def _aggregate(records: List[dict], method_names: Sequence[str]) -> Dict[str, dict]:
    out = {}
    for name in method_names:
        rows = [r["methods"][name] for r in records
                if r.get("methods", {}).get(name, {}).get("ok")]
        if not rows:
            out[name] = {"n_ok": 0}
            continue
        pulls = np.array([r["pull"] for r in rows])
        ests = np.array([r["estimate"] for r in rows])
        out[name] = {
            "n_ok": len(rows),
            "mean_estimate": float(ests.mean()),
            "bias": float(ests.mean() - TRUE_SLOPE),
            "mean_pull": float(pulls.mean()),
            "pull_width": float(pulls.std(ddof=1)) if len(rows) > 1 else np.nan,
            "mean_pull_naive": float(np.nanmean([r["pull_naive"] for r in rows])),
            "pull_width_naive": (float(np.nanstd([r["pull_naive"] for r in rows], ddof=1))
                                 if len(rows) > 1 else np.nan),
            "coverage68": float(np.mean([r["covered68"] for r in rows])),
            "mean_sum_w": float(np.mean([r["sum_w"] for r in rows])),
            "mean_sum_w2": float(np.mean([r["sum_w2"] for r in rows])),
            "mean_neq": float(np.mean([r["neq"] for r in rows])),
        }
    return out


def run_ensemble(config: EnsembleConfig) -> EnsembleReport:
    """Run n_toys independent pseudo-experiments and aggregate the results.

    Toy i uses seed base_seed + i; failed toys are flagged and kept in the
    records.  The report is invalid if more than 10% of toys failed.
    """
    if config.n_toys < 1:
        raise ConstructionError("n_toys must be >= 1")
    indices = list(range(config.n_toys))
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            records = list(pool.map(_run_toy_star, [(config, i) for i in indices]))
    else:
        records = [run_toy(config, i) for i in indices]
    records.sort(key=lambda r: r["toy"])
    n_failed = sum(1 for r in records if not r["ok"])
    names = [ms.name for ms in config.methods]
    aggregates = _aggregate(records, names)
    valid = n_failed <= MAX_FAILURE_FRACTION * config.n_toys
    return EnsembleReport(config=config.to_dict(),
                          seeds=[config.base_seed + i for i in indices],
                          records=records, aggregates=aggregates,
                          n_failed=n_failed, valid=valid)


def _run_toy_star(args):
    return run_toy(*args)
