"""Command-line entry point.

Subcommands: fit, sweights, cow, correct, check-independence, toys and
pipeline.  Configuration is JSON; tabular input and output are CSV with the
convention that the first column is the discriminating variable m and the
second, when present, the control variable t.  Every output embeds the
sha256 hash of the fully-resolved config and the seed in effect, so reruns
with identical inputs are bit-identical.  The environment variable
COWLIB_SEED overrides any config seed.

Exit codes: 0 success, 1 input error, 2 numerical non-convergence,
3 invalid ensemble.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from typing import List, Optional, Tuple

import numpy as np

from . import __version__
from .cows import (CowSpec, HistogramVariance, MixtureVariance, UnityVariance,
                   build_cow, efficiency_corrected_weights, variance_fn_qm,
                   variance_fn_ml_iterative)
from .densities import (Density1D, EfficiencyMap, Interval, UNIT_EFFICIENCY,
                        monomial_basis)
from .diagnostics import kendall_tau
from .errors import (ConstructionError, CowlibError, EvaluationError,
                     NonConvergenceError)
from .mlfit import MixtureComponent, MixtureModel, fit_extended_ml, fit_weighted_ml
from .sweights import (compute_W_variant_A, compute_W_variant_B,
                       compute_W_variant_C, weight_functions)
from .toygen import EnsembleConfig, MethodSpec, ToySpec, generate, run_ensemble
from .wcov import (corrected_covariance_cow, corrected_covariance_fixed_shapes,
                   equivalent_events)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NONCONVERGENCE = 2
EXIT_INVALID_ENSEMBLE = 3


class CliInputError(Exception):
    """Bad config, missing file or malformed data; maps to exit code 1."""


# ---------------------------------------------------------------------------
# serialization helpers

def _round_trip_floats(obj):
    """Clamp floats to 17 significant digits (a no-op on the value itself)."""
    if isinstance(obj, dict):
        return {k: _round_trip_floats(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_round_trip_floats(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _round_trip_floats(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (float, np.floating)):
        return float(format(float(obj), ".17g"))
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_round_trip_floats(obj), sort_keys=True, indent=2)


def config_hash(resolved: dict) -> str:
    return hashlib.sha256(canonical_json(resolved).encode()).hexdigest()


def _write_json(path: Optional[str], obj: dict):
    text = canonical_json(obj)
    if path is None:
        print(text)
    else:
        with open(path, "w") as fh:
            fh.write(text + "\n")


def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliInputError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliInputError(f"{path} is not valid JSON: {exc}") from exc


def read_csv(path: str, min_cols: int = 1) -> Tuple[List[str], np.ndarray]:
    """Read a numeric CSV; a non-numeric first row is taken as the header.

    Raises :class:`CliInputError` naming the 1-based line of any malformed
    row.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise CliInputError(f"cannot read {path}: {exc}") from exc
    rows = []
    names = None
    with fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                if lineno == 1 and names is None:
                    names = [v.strip() for v in row]
                    continue
                raise CliInputError(f"{path}: malformed CSV row at line {lineno}") from exc
            if names is not None and len(row) != len(names):
                raise CliInputError(f"{path}: wrong column count at line {lineno}")
    if not rows:
        raise CliInputError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=float)
    if data.shape[1] < min_cols:
        raise CliInputError(f"{path}: need at least {min_cols} columns, found {data.shape[1]}")
    if names is None:
        names = ["m", "t"][: data.shape[1]] + [f"c{i}" for i in range(2, data.shape[1])]
    return names, data


def write_csv(path: str, names: List[str], data: np.ndarray):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in np.atleast_2d(data):
            writer.writerow([format(float(v), ".17g") for v in row])


# ---------------------------------------------------------------------------
# config plumbing

def _resolve(config: dict, defaults: dict, context: str) -> dict:
    out = dict(defaults)
    for key, val in config.items():
        if key not in defaults:
            raise CliInputError(f"unknown {context} config key {key!r}")
        out[key] = val
    return out


def _apply_seed_override(resolved: dict, key: str = "seed"):
    env = os.environ.get("COWLIB_SEED")
    if env is not None:
        try:
            resolved[key] = int(env)
        except ValueError as exc:
            raise CliInputError(f"COWLIB_SEED must be an integer, got {env!r}") from exc


def _stamp(resolved: dict) -> dict:
    return {"config_hash": config_hash(resolved),
            "seed": resolved.get("seed", resolved.get("base_seed", 0)),
            "version": __version__}


def _density_from_cfg(cfg: dict, support: Optional[Interval] = None) -> Density1D:
    if not isinstance(cfg, dict) or "kind" not in cfg:
        raise CliInputError("density config must be an object with a 'kind'")
    try:
        if "support" in cfg:
            d = dict(cfg)
            lo, hi = d.pop("support")
            return Density1D.from_dict({**d, "support": [lo, hi]})
        if support is None:
            raise CliInputError("density config needs a 'support'")
        return Density1D.from_dict({**cfg, "support": list(support.as_tuple())})
    except (ConstructionError, KeyError, TypeError, ValueError) as exc:
        raise CliInputError(f"bad density config: {exc}") from exc


def _model_from_cfg(cfg: dict, n_events: int) -> MixtureModel:
    if not isinstance(cfg, dict):
        raise CliInputError("model config must be an object")
    try:
        support = Interval(*cfg["support"])
    except (KeyError, TypeError, ConstructionError) as exc:
        raise CliInputError(f"model config needs a valid 'support': {exc}") from exc
    comps_cfg = cfg.get("components")
    if not comps_cfg or len(comps_cfg) < 2:
        raise CliInputError("model config needs at least two components")
    comps = []
    for i, c in enumerate(comps_cfg):
        dens = _density_from_cfg(c, support)
        comps.append(MixtureComponent(c.get("label", f"c{i}"), dens,
                                      bool(c.get("free_shape", False))))
    yields = cfg.get("yields")
    if yields is None:
        yields = [n_events / len(comps)] * len(comps)
    try:
        return MixtureModel(comps, np.asarray(yields, dtype=float))
    except ConstructionError as exc:
        raise CliInputError(f"bad model config: {exc}") from exc


def _efficiency_from_path(path: Optional[str]) -> Optional[EfficiencyMap]:
    if path is None:
        return None
    d = _load_json(path)
    try:
        return EfficiencyMap.from_dict(d)
    except (ConstructionError, KeyError, TypeError) as exc:
        raise CliInputError(f"bad efficiency map {path}: {exc}") from exc


def _fit_to_dict(fit) -> dict:
    return fit.to_dict()


# ---------------------------------------------------------------------------
# subcommands

FIT_DEFAULTS = {"data": None, "model": None, "out": None, "seed": 0}


def cmd_fit(config: dict, echo: bool) -> int:
    resolved = _resolve(config, FIT_DEFAULTS, "fit")
    _apply_seed_override(resolved)
    if echo:
        return _echo(resolved)
    if resolved["data"] is None or resolved["model"] is None:
        raise CliInputError("fit config needs 'data' and 'model'")
    _, data = read_csv(resolved["data"], min_cols=1)
    model = _model_from_cfg(resolved["model"], data.shape[0])
    fit = fit_extended_ml(data[:, 0], model)
    out = {**_stamp(resolved), "fit": _fit_to_dict(fit)}
    _write_json(resolved["out"], out)
    return EXIT_OK if fit.converged else EXIT_NONCONVERGENCE


SWEIGHTS_DEFAULTS = {"data": None, "model": None, "variant": "B",
                     "out_weights": None, "out_summary": None, "seed": 0}


def _sweights_from_fit(variant: str, fit, m: np.ndarray):
    gs = fit.model.components[0].density
    gb = fit.model.components[1].density
    z = float(fit.params[0] / fit.params[:2].sum())
    if variant == "A":
        wm = compute_W_variant_A(gs, gb, z, gs.support)
    elif variant == "B":
        wm = compute_W_variant_B(gs, gb, z, m)
    elif variant == "Ci":
        wm = compute_W_variant_C(fit, len(m), "invert-full-cov")
    elif variant == "Cii":
        wm = compute_W_variant_C(fit, len(m), "yields-only-cov")
    else:
        raise CliInputError(f"unknown sweights variant {variant!r}")
    return wm, weight_functions(wm, gs, gb)


def cmd_sweights(config: dict, echo: bool) -> int:
    resolved = _resolve(config, SWEIGHTS_DEFAULTS, "sweights")
    _apply_seed_override(resolved)
    if echo:
        return _echo(resolved)
    if resolved["data"] is None or resolved["model"] is None:
        raise CliInputError("sweights config needs 'data' and 'model'")
    names, data = read_csv(resolved["data"], min_cols=1)
    if len(resolved["model"].get("components", [])) != 2:
        raise CliInputError("sweights needs a two-component model")
    model = _model_from_cfg(resolved["model"], data.shape[0])
    fit = fit_extended_ml(data[:, 0], model)
    if not fit.converged:
        return EXIT_NONCONVERGENCE
    wm, wfs = _sweights_from_fit(resolved["variant"], fit, data[:, 0])
    w = wfs.all(data[:, 0])
    if resolved["out_weights"]:
        write_csv(resolved["out_weights"], names[: data.shape[1]] + ["w_s", "w_b"],
                  np.column_stack([data, w]))
    summary = {**_stamp(resolved), "fit": _fit_to_dict(fit), "W": wm.to_dict(),
               "sum_w_s": float(w[:, 0].sum()), "sum_w_s2": float((w[:, 0] ** 2).sum()),
               "warnings": wfs.warnings}
    _write_json(resolved["out_summary"], summary)
    return EXIT_OK


COW_DEFAULTS = {"data": None, "basis": None, "n_signal": 1, "support": None,
                "poly_order": 0, "variance": "unity", "qm_bins": 50,
                "efficiency": None, "signal_proxy": None,
                "out_weights": None, "out_summary": None, "seed": 0}


def _build_cow_from_cfg(resolved: dict, data: np.ndarray):
    if resolved["support"] is None:
        raise CliInputError("cow config needs a 'support'")
    support = Interval(*resolved["support"])
    if not resolved["basis"]:
        raise CliInputError("cow config needs a nonempty 'basis'")
    basis = [_density_from_cfg(c, support) for c in resolved["basis"]]
    if resolved["poly_order"] > 0:
        basis = basis + monomial_basis(resolved["poly_order"] + 1, support)
    eff = _efficiency_from_path(resolved["efficiency"])
    proxy = (None if resolved["signal_proxy"] is None
             else _density_from_cfg(resolved["signal_proxy"], support))

    kind = resolved["variance"]
    if kind == "unity":
        var = UnityVariance()
    elif kind == "qm":
        if data.shape[1] < 2:
            raise CliInputError("variance 'qm' needs (m, t) data")
        var = HistogramVariance(
            variance_fn_qm(data[:, :2], eff or UNIT_EFFICIENCY, resolved["qm_bins"],
                           support=support))
    elif kind == "mixture":
        mix_data = data[:, :2] if data.shape[1] >= 2 else data[:, 0]
        _, var = variance_fn_ml_iterative(basis, mix_data, eff)
    else:
        raise CliInputError(f"unknown variance kind {kind!r}")

    spec = CowSpec(basis=basis, variance_fn=var, support=support,
                   n_signal=int(resolved["n_signal"]), signal_proxy=proxy,
                   efficiency=eff)
    return build_cow(spec), eff


def cmd_cow(config: dict, echo: bool) -> int:
    resolved = _resolve(config, COW_DEFAULTS, "cow")
    _apply_seed_override(resolved)
    if echo:
        return _echo(resolved)
    if resolved["data"] is None:
        raise CliInputError("cow config needs 'data'")
    names, data = read_csv(resolved["data"], min_cols=1)
    cow, eff = _build_cow_from_cfg(resolved, data)
    if data.shape[1] >= 2:
        w = efficiency_corrected_weights(cow, eff, data[:, :2])
    else:
        w = efficiency_corrected_weights(cow, eff, data[:, 0])
    if resolved["out_weights"]:
        wnames = [f"w_{k}" for k in range(w.shape[1])]
        write_csv(resolved["out_weights"], names[: data.shape[1]] + wnames,
                  np.column_stack([data, w]))
    summary = {**_stamp(resolved), "W": cow.W, "A": cow.A,
               "sum_w": w.sum(axis=0), "sum_w2": (w ** 2).sum(axis=0)}
    _write_json(resolved["out_summary"], summary)
    return EXIT_OK


CORRECT_DEFAULTS = {"data": None, "weights": None, "weight_column": "w_s",
                    "control_model": None, "out": None, "seed": 0}


def cmd_correct(config: dict, echo: bool) -> int:
    """Weighted control-variable fit with the plain sandwich correction.

    Weights are taken as externally fixed, so the reduction term for
    fit-derived weights does not apply here; use `pipeline` for the full
    chain.
    """
    resolved = _resolve(config, CORRECT_DEFAULTS, "correct")
    _apply_seed_override(resolved)
    if echo:
        return _echo(resolved)
    for key in ("data", "weights", "control_model"):
        if resolved[key] is None:
            raise CliInputError(f"correct config needs {key!r}")
    _, data = read_csv(resolved["data"], min_cols=2)
    wnames, wdata = read_csv(resolved["weights"], min_cols=1)
    if resolved["weight_column"] in wnames:
        w = wdata[:, wnames.index(resolved["weight_column"])]
    elif wdata.shape[1] == 1:
        w = wdata[:, 0]
    else:
        raise CliInputError(f"weight column {resolved['weight_column']!r} not found")
    if len(w) != data.shape[0]:
        raise CliInputError("weights and data have different lengths")
    hs = _density_from_cfg(resolved["control_model"])
    t = data[:, 1]
    tfit = fit_weighted_ml(t, w, hs)
    if not tfit.converged:
        return EXIT_NONCONVERGENCE
    corr = corrected_covariance_fixed_shapes(t, w, None, hs, tfit.params)
    out = {**_stamp(resolved), "fit": _fit_to_dict(tfit),
           "covariance": corr.to_dict(),
           "sum_w": float(w.sum()), "sum_w2": float((w ** 2).sum()),
           "n_equivalent": equivalent_events(w)}
    _write_json(resolved["out"], out)
    return EXIT_OK


CHECK_DEFAULTS = {"data": None, "x": "m", "y": "t", "out": None, "seed": 0}


def cmd_check_independence(config: dict, echo: bool) -> int:
    resolved = _resolve(config, CHECK_DEFAULTS, "check-independence")
    _apply_seed_override(resolved)
    if echo:
        return _echo(resolved)
    if resolved["data"] is None:
        raise CliInputError("check-independence config needs 'data'")
    names, data = read_csv(resolved["data"], min_cols=2)

    def col(name):
        if name in names:
            return data[:, names.index(name)]
        raise CliInputError(f"column {name!r} not in {names}")

    report = kendall_tau(col(resolved["x"]), col(resolved["y"]))
    out = {**_stamp(resolved), "report": report.to_dict(),
           "x": resolved["x"], "y": resolved["y"],
           "tau_over_sigma": report.tau / report.approx_sigma}
    _write_json(resolved["out"], out)
    return EXIT_OK


TOYS_DEFAULTS = {"toy": None, "methods": None, "n_toys": 1, "base_seed": 0,
                 "jobs": 1, "out": None, "export_dataset": None}


def cmd_toys(config: dict, echo: bool, jobs_override: Optional[int] = None) -> int:
    resolved = _resolve(config, TOYS_DEFAULTS, "toys")
    _apply_seed_override(resolved, key="base_seed")
    if jobs_override is not None:
        resolved["jobs"] = jobs_override
    if echo:
        return _echo(resolved)
    if resolved["toy"] is None:
        raise CliInputError("toys config needs a 'toy' spec")
    try:
        toy = ToySpec(**resolved["toy"])
        methods = [MethodSpec(**m) for m in (resolved["methods"] or [])]
    except (TypeError, ConstructionError) as exc:
        raise CliInputError(f"bad toys config: {exc}") from exc
    ens = EnsembleConfig(toy=toy, methods=methods, n_toys=int(resolved["n_toys"]),
                         base_seed=int(resolved["base_seed"]), jobs=int(resolved["jobs"]))
    if resolved["export_dataset"]:
        ds = generate(ToySpec(**{**toy.to_dict(), "seed": ens.base_seed}))
        write_csv(resolved["export_dataset"], ds.columns + ["label"],
                  np.column_stack([ds.data, ds.labels]))
    report = run_ensemble(ens)
    out = {**_stamp(resolved), "report": report.to_dict()}
    _write_json(resolved["out"], out)
    return EXIT_OK if report.valid else EXIT_INVALID_ENSEMBLE


PIPELINE_DEFAULTS = {"data": None, "model": None, "method": "sweights-B",
                     "cow": None, "control_model": None,
                     "out_weights": None, "out_covariance": None,
                     "out_summary": None, "seed": 0}


def cmd_pipeline(config: dict, echo: bool) -> int:
    resolved = _resolve(config, PIPELINE_DEFAULTS, "pipeline")
    _apply_seed_override(resolved)
    method = resolved["method"]
    cow_cfg = _resolve(resolved["cow"] or {},
                       {"poly_order": 0, "variance": "mixture", "qm_bins": 50,
                        "efficiency": None}, "pipeline cow")
    if method.startswith("sweights") and cow_cfg["efficiency"] is not None:
        # an m-dependent efficiency invalidates the classic per-event w/eps
        raise CliInputError(
            "efficiency maps require the cow method; classic weights divided "
            "by a position-dependent efficiency are biased")
    if echo:
        return _echo(resolved)
    for key in ("data", "model", "control_model"):
        if resolved[key] is None:
            raise CliInputError(f"pipeline config needs {key!r}")
    names, data = read_csv(resolved["data"], min_cols=2)
    m, t = data[:, 0], data[:, 1]
    model = _model_from_cfg(resolved["model"], len(m))
    fit = fit_extended_ml(m, model)
    if not fit.converged:
        return EXIT_NONCONVERGENCE

    dW = None
    extra = {}
    if method.startswith("sweights-"):
        variant = method.split("-", 1)[1]
        wm, wfs = _sweights_from_fit(variant, fit, m)
        w = wfs.w_s(m)
        dW = wfs.dw_s_dW(m)
        weight_cols = wfs.all(m)
        wnames = ["w_s", "w_b"]
        extra["W"] = wm.to_dict()
    elif method == "cow":
        gs_hat = fit.model.components[0].density
        gb_hat = fit.model.components[1].density
        support = model.support
        if cow_cfg["poly_order"] > 0:
            basis = [gs_hat] + monomial_basis(cow_cfg["poly_order"] + 1, support)
        else:
            basis = [gs_hat, gb_hat]
        eff = _efficiency_from_path(cow_cfg["efficiency"])
        if cow_cfg["variance"] == "unity":
            var = UnityVariance()
        elif cow_cfg["variance"] == "qm":
            var = HistogramVariance(
                variance_fn_qm(data[:, :2], eff or UNIT_EFFICIENCY, cow_cfg["qm_bins"],
                               support=support))
        elif cow_cfg["variance"] == "mixture":
            _, var = variance_fn_ml_iterative(basis, data[:, :2], eff)
        else:
            raise CliInputError(f"unknown variance kind {cow_cfg['variance']!r}")
        spec = CowSpec(basis=basis, variance_fn=var, support=support,
                       n_signal=1, efficiency=eff)
        cow = build_cow(spec)
        weight_cols = efficiency_corrected_weights(cow, eff, data[:, :2])
        w = weight_cols[:, 0]
        wnames = [f"w_{k}" for k in range(weight_cols.shape[1])]
        extra["W"] = cow.W
    else:
        raise CliInputError(f"unknown method {method!r}")

    hs = _density_from_cfg(resolved["control_model"])
    tfit = fit_weighted_ml(t, w, hs)
    if not tfit.converged:
        return EXIT_NONCONVERGENCE
    gs_hat = fit.model.components[0].density
    gb_hat = fit.model.components[1].density
    if method == "cow":
        corr = corrected_covariance_cow(cow, data[:, :2], hs, tfit.params, eff=eff)
    else:
        corr = corrected_covariance_fixed_shapes(
            t, w, dW, hs, tfit.params,
            gs=gs_hat, gb=gb_hat, yields=fit.params[:2], data_m=m)

    tau = kendall_tau(m, t)
    stamp = _stamp(resolved)
    if resolved["out_weights"]:
        write_csv(resolved["out_weights"], names[:2] + wnames,
                  np.column_stack([data[:, :2], weight_cols]))
    if resolved["out_covariance"]:
        _write_json(resolved["out_covariance"], {**stamp, "covariance": corr.to_dict()})
    summary = {**stamp, "method": method,
               "m_fit": _fit_to_dict(fit), "t_fit": _fit_to_dict(tfit),
               "sigma_naive": (None if corr.naive is None
                               else float(np.sqrt(corr.naive[0, 0]))),
               "sigma_corrected": float(np.sqrt(corr.theta_block[0, 0])),
               "sum_w": float(w.sum()), "sum_w2": float((w ** 2).sum()),
               "n_equivalent": equivalent_events(w),
               "kendall_tau": tau.to_dict(), **extra}
    _write_json(resolved["out_summary"], summary)
    return EXIT_OK


def _echo(resolved: dict) -> int:
    """Print version and the fully-resolved config; idempotent round trip."""
    print(f"# cowlib {__version__}", file=sys.stderr)
    print(canonical_json(resolved))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point

_COMMANDS = {
    "fit": cmd_fit,
    "sweights": cmd_sweights,
    "cow": cmd_cow,
    "correct": cmd_correct,
    "check-independence": cmd_check_independence,
    "toys": cmd_toys,
    "pipeline": cmd_pipeline,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cowlib",
        description="Orthogonal event weights: extraction, correction, toys.")
    parser.add_argument("--version", action="version", version=f"cowlib {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--echo", action="store_true",
                       help="print the resolved config and exit")
        if name == "toys":
            p.add_argument("--jobs", type=int, default=None,
                           help="parallel toy workers (overrides config)")
            p.add_argument("--out", default=None,
                           help="report path (overrides config)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = _load_json(args.config)
        if args.command == "toys":
            if args.out is not None:
                config["out"] = args.out
            return cmd_toys(config, args.echo, jobs_override=args.jobs)
        return _COMMANDS[args.command](config, args.echo)
    except CliInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NonConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except ConstructionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CowlibError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
