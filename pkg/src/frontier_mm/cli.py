"""Command-line entry point: estimate, bound, fit-dist, check-feasibility, simulate.

Settings come from defaults, then an optional JSON config (--config), then
flags. Every run writes config_echo.json with the resolved settings.
Exit codes: 0 ok, 1 some estimates failed or did not converge, 2 bad input,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import bounds, io
from .fit import (FitConfig, InfeasibleFitError, default_bandwidth, effective_sample_sizes,
                  fit_deviation_distribution, fit_many, frontier_estimate, conditional_sup_frontier)
from .moments import DegeneratePanelError, conditional_moments, pooled_moments
from .panel import CsvSchema, PanelError, load_panel_csv, validate
from .residualize import BasisSpec, decompose_residuals, fit_conditional_mean
from .sim import (GRID_COLUMNS, REGION_COLUMNS, REPRESENTATIVE, SimDesign, log_grid, run_experiment)

log = logging.getLogger("frontier_mm")

EXIT_OK, EXIT_WARN, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "FRONTIER_MM_SEED"

DEFAULTS = {
    "seed": None,
    "schema": {"firm_col": "firm", "period_col": "period", "y_col": "y", "x_cols": ["x"]},
    "basis": {"kind": "polynomial", "degree": 1, "knots": None, "include_interactions": True, "max_knots": 12},
    "ridge": "gcv",
    "conditioning": "xbar",
    "moment_basis": None,  # basis for smoothing moments; None reuses "basis"
    "fit": FitConfig().to_dict(),
    "sim": {"designs": None, "grid": None, "estimators": [{"c": "inf"}, {"m0": 1, "c": 1}],
            "truth": "analytic"},
}


class InputError(Exception):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_path(cfg: dict, dotted: str, value):
    keys = dotted.split(".")
    d = cfg
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


# flag dest -> config path
_FLAG_PATHS = {
    "seed": "seed", "firm_col": "schema.firm_col", "period_col": "schema.period_col", "y_col": "schema.y_col",
    "x_cols": "schema.x_cols", "basis": "basis.kind", "degree": "basis.degree", "knots": "basis.knots",
    "ridge": "ridge", "conditioning": "conditioning", "family": "fit.family", "m0": "fit.m0", "c": "fit.c",
    "h": "fit.h", "multistarts": "fit.multistarts", "max_iter": "fit.max_iter", "tol": "fit.tol",
    "reps": "sim.reps", "grid_size": "sim.grid", "truth": "sim.truth",
}


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        try:
            cfg = _merge(cfg, io.read_json(args.config))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
    for dest, path in _FLAG_PATHS.items():
        v = getattr(args, dest, None)
        if v is not None:
            _set_path(cfg, path, v)
    if cfg.get("seed") is None:
        env = os.environ.get(SEED_ENV)
        try:
            cfg["seed"] = int(env) if env not in (None, "") else 0
        except ValueError as exc:
            raise InputError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    cfg["seed"] = int(cfg["seed"])
    cfg["fit"]["seed"] = cfg["seed"]
    return cfg


def _fit_config(cfg) -> FitConfig:
    try:
        return FitConfig.from_dict(cfg["fit"])
    except (TypeError, ValueError) as exc:
        raise InputError(f"fit config: {exc}") from exc


def _basis(d) -> BasisSpec:
    try:
        return BasisSpec(**d)
    except (TypeError, ValueError) as exc:
        raise InputError(f"basis config: {exc}") from exc


def _ridge(v):
    if v in (None, "gcv"):
        return "gcv"
    try:
        return float(v)
    except ValueError as exc:
        raise InputError(f"ridge must be 'gcv' or a number, got {v!r}") from exc


def _echo(out: Path, command: str, cfg: dict, extra: dict | None = None):
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "config": cfg}
    if extra:
        doc.update(extra)
    io.write_json(out / "config_echo.json", doc)


def _out_dir(args) -> Path:
    return Path(args.out)


# ---------------------------------------------------------------- estimate

def cmd_estimate(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    _echo(out, "estimate", cfg, {"input": str(args.input)})
    schema = CsvSchema(**{k: (tuple(v) if k == "x_cols" else v) for k, v in cfg["schema"].items()})
    try:
        data = load_panel_csv(args.input, schema)
    except OSError as exc:
        raise InputError(f"panel: {exc}") from exc
    if data.n_firms == 0:
        raise InputError("panel: no usable rows")
    rep = validate(data)
    for w in (["pooled fourth moments need some firm with T >= 4"] if not rep.pooled_mu4_ok else []):
        log.warning(w)
    spec = _basis(cfg["basis"])
    mspec = _basis(cfg["moment_basis"]) if cfg.get("moment_basis") else spec
    ridge = _ridge(cfg["ridge"])
    fcfg = _fit_config(cfg)

    model = fit_conditional_mean(data, spec, ridge, cfg["conditioning"])
    dec = decompose_residuals(data, model)
    pooled = pooled_moments(dec)
    cond = conditional_moments(dec, mspec, ridge)

    # pooled (COLS-style) fit: constant moments, n_eff = number of firms
    pooled_fit = fit_deviation_distribution(pooled.u, data.n_firms, fcfg, scale_ref=pooled.mu2_ebar,
                                            stream=2**32 - 1)
    pooled_bound = bounds.bound_report(pooled.mu2_u, pooled.mu3_u, pooled.mu4_u) if pooled.mu2_u > 0 else None

    h = fcfg.h if fcfg.h is not None else default_bandwidth(dec.xbar)
    n_eff = effective_sample_sizes(dec.xbar, h)
    triples = np.column_stack([cond.mu2_u, cond.mu3_u, cond.mu4_u])
    fits = fit_many(triples, n_eff, fcfg, scale_ref=pooled.mu2_ebar, jobs=args.jobs)

    firms, eu, warn = [], np.full(data.n_firms, np.nan), 0
    for i, fid in enumerate(data.firm_ids):
        row = {"firm": fid, "n_eff": float(n_eff[i]), "moments": triples[i].tolist()}
        f = fits[i]
        if isinstance(f, InfeasibleFitError):
            row["error"] = str(f)
            warn += 1
        else:
            row["fit"] = f.to_dict()
            eu[i] = f.implied_mean
            warn += 0 if f.converged else 1
            if triples[i][0] > 0:
                row["lb_skew"] = bounds.skewness_lower_bound(triples[i][0], triples[i][1])
        firms.append(row)

    pred = model.predict(data)
    x, y, idx = data.stacked()
    fe = frontier_estimate(pred, eu, firm_index=idx, firm_ids=[data.firm_ids[j] for j in idx])
    cols = pred + pooled_fit.implied_mean

    mom = {"pooled": pooled.to_dict(), "conditional": cond.to_dict(),
           "mean_model": {"ridge_lambda": model.ridge_lambda, "gcv_score": model.gcv_score,
                          "n_extrapolated": model.n_extrapolated, "dim": int(len(model.coefficients))}}
    io.write_json(out / "moments.json", mom)
    fdoc = {"bandwidth": h, "pooled": {"fit": pooled_fit.to_dict(),
                                       "bounds": pooled_bound.to_dict() if pooled_bound else None},
            "firms": firms}
    if args.sup_radius is not None:
        x0 = np.median(x, axis=0)
        fdoc["conditional_sup"] = {"x0": x0.tolist(), "radius": args.sup_radius,
                                   "value": conditional_sup_frontier(data, x0, args.sup_radius)}
    io.write_json(out / "fits.json", fdoc)

    periods = [p for fb in data.firms for p in (fb.periods or range(fb.T))]
    header = ["firm", "period", *schema.x_cols, schema.y_col, "mean_prediction", "mean_deviation", "g_hat",
              "g_hat_cols"]
    rows = [[fe.firm_ids[k], periods[k], *x[k].tolist(), y[k], pred[k], fe.mean_deviation[k], fe.g_hat[k],
             cols[k]] for k in range(len(y))]
    io.write_csv(out / "frontier.csv", header, rows)
    if warn:
        log.warning("%d firm fits failed or did not converge", warn)
    return EXIT_WARN if warn else EXIT_OK


# ---------------------------------------------------------------- bound

def _moments_from_args(args, cfg):
    if args.moments:
        try:
            d = io.read_json(args.moments)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"moments file: {exc}") from exc
        d = d.get("pooled", d)
        return (float(d["mu2_u"] if "mu2_u" in d else d["mu2"]), float(d["mu3_u"] if "mu3_u" in d else d["mu3"]),
                d.get("mu4_u", d.get("mu4")), d.get("mu5"), d.get("mean"))
    if getattr(args, "input", None):
        schema = CsvSchema(**{k: (tuple(v) if k == "x_cols" else v) for k, v in cfg["schema"].items()})
        data = load_panel_csv(args.input, schema)
        model = fit_conditional_mean(data, _basis(cfg["basis"]), _ridge(cfg["ridge"]), cfg["conditioning"])
        est = pooled_moments(decompose_residuals(data, model))
        return est.mu2_u, est.mu3_u, est.mu4_u, None, None
    if args.mu2 is None or args.mu3 is None:
        raise InputError("give --mu2 and --mu3, a --moments file, or an --input panel")
    return args.mu2, args.mu3, args.mu4, args.mu5, args.mean


def cmd_bound(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    _echo(out, "bound", cfg, {"flags": {k: getattr(args, k) for k in ("mu2", "mu3", "mu4", "mu5", "mean")},
                              "moments": args.moments, "input": args.input})
    mu2, mu3, mu4, mu5, mean = _moments_from_args(args, cfg)
    try:
        rep = bounds.bound_report(mu2, mu3, None if mu4 is None else float(mu4),
                                  None if mu5 is None else float(mu5), None if mean is None else float(mean))
    except bounds.DomainError as exc:
        raise InputError(f"bounds: {exc}") from exc
    io.write_json(out / "bound_report.json", rep.to_dict())
    return EXIT_OK


# ---------------------------------------------------------------- fit-dist

def cmd_fit_dist(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    _echo(out, "fit-dist", cfg, {"moments": [args.mu2, args.mu3, args.mu4], "n_eff": args.n_eff})
    fcfg = _fit_config(cfg)
    try:
        res = fit_deviation_distribution((args.mu2, args.mu3, args.mu4), args.n_eff, fcfg)
    except InfeasibleFitError as exc:
        io.write_json(out / "fit_result.json", {"error": str(exc)})
        return EXIT_WARN
    doc = res.to_dict()
    doc["model_moments"] = [res.params.central_moment(k) for k in (2, 3, 4)]
    io.write_json(out / "fit_result.json", doc)
    return EXIT_OK if res.converged else EXIT_WARN


# ---------------------------------------------------------------- check-feasibility

def _floats(s: str):
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError as exc:
        raise InputError(f"expected comma-separated numbers, got {s!r}") from exc


def cmd_check_feasibility(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    _echo(out, "check-feasibility", cfg, {"raw": args.raw, "central": args.central, "order": args.order})
    if args.raw:
        m = _floats(args.raw)
    elif args.central:
        vals = _floats(args.central)
        if len(vals) < 2:
            raise InputError("--central needs mean,mu2[,mu3,...]")
        m = bounds.central_to_raw(vals[0], vals[1:])
    else:
        raise InputError("give --raw m1,m2,... or --central mean,mu2,...")
    try:
        res = bounds.hankel_feasibility(m, order=args.order)
    except bounds.DomainError as exc:
        raise InputError(f"bounds: {exc}") from exc
    doc = res.to_dict()
    doc["raw"] = m
    io.write_json(out / "feasibility.json", doc)
    return EXIT_OK


# ---------------------------------------------------------------- simulate

FULL_GRID = 80
FULL_REPS = 150


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    sc = cfg["sim"]
    designs = sc.get("designs")
    if args.design:
        try:
            d = io.read_json(args.design)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"design file: {exc}") from exc
        if isinstance(d, dict) and "designs" in d:
            sc = _merge(sc, {k: v for k, v in d.items()})
            designs = d["designs"]
        else:
            designs = d if isinstance(d, list) else [d]
    if designs is None:
        designs = [{"a": a, "b": b} for a, b in REPRESENTATIVE.values()]
    if args.n is not None:
        designs = [dict(d, n=n) for d in designs for n in args.n]
    reps = args.reps if args.reps is not None else sc.get("reps")
    grid = sc.get("grid")
    if args.full_grid:
        grid, reps = FULL_GRID, FULL_REPS
        warnings.warn(f"full grid: {FULL_GRID}x{FULL_GRID} points x {FULL_REPS} replications per design; "
                      "expect days of CPU time", RuntimeWarning, stacklevel=1)
    try:
        objs = []
        for d in designs:
            d = dict(d)
            d["seed"] = cfg["seed"]
            if reps is not None:
                d["reps"] = int(reps)
            objs.append(SimDesign.from_dict(d))
        ests = [FitConfig.from_dict(_merge(cfg["fit"], e)) for e in sc["estimators"]]
    except (TypeError, ValueError) as exc:
        raise InputError(f"simulation config: {exc}") from exc
    pts = log_grid(int(grid)) if grid else None
    out = _out_dir(args)
    resolved = {"designs": [d.to_dict() for d in objs], "estimators": [e.to_dict() for e in ests],
                "grid": grid, "truth": sc.get("truth", "analytic")}
    _echo(out, "simulate", cfg, {"resolved": resolved})
    mt = run_experiment(objs, ests, grid=pts, jobs=args.jobs, truth=sc.get("truth", "analytic"))
    io.write_csv(out / "metrics.csv", REGION_COLUMNS, [[r[c] for c in REGION_COLUMNS] for r in mt.regions])
    io.write_csv(out / "grid.csv", GRID_COLUMNS, [[r[c] for c in GRID_COLUMNS] for r in mt.grid])
    failed = sum(r["failures"] for r in mt.regions)
    return EXIT_WARN if failed else EXIT_OK


# ---------------------------------------------------------------- parser

def _default_jobs() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return os.cpu_count() or 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="frontier-mm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="JSON config; flags override its fields")
        sp.add_argument("--seed", type=int, help=f"global seed (fallback: ${SEED_ENV}, then 0)")
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--jobs", type=int, default=_default_jobs(), help="worker processes")

    def fit_flags(sp):
        sp.add_argument("--family", choices=["scaled_beta", "trunc_normal"])
        sp.add_argument("--m0", type=float)
        sp.add_argument("--c", type=lambda s: s if s.lower() == "inf" else float(s), help="number or 'inf'")
        sp.add_argument("--h", type=float, help="kernel bandwidth")
        sp.add_argument("--multistarts", type=int)
        sp.add_argument("--max-iter", type=int)
        sp.add_argument("--tol", type=float)

    def panel_flags(sp):
        sp.add_argument("--input", help="panel CSV")
        sp.add_argument("--firm-col")
        sp.add_argument("--period-col")
        sp.add_argument("--y-col")
        sp.add_argument("--x-cols", type=lambda s: [c.strip() for c in s.split(",")])
        sp.add_argument("--basis", choices=["polynomial", "cubic-spline"])
        sp.add_argument("--degree", type=int)
        sp.add_argument("--knots", type=int)
        sp.add_argument("--ridge", help="'gcv' or a number")
        sp.add_argument("--conditioning", choices=["xbar", "xit", "both"])

    sp = sub.add_parser("estimate", help="frontier and mean deviation from a panel CSV")
    common(sp, "out_estimate")
    panel_flags(sp)
    fit_flags(sp)
    sp.add_argument("--sup-radius", type=float, help="also report the conditional-sup diagnostic")
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("bound", help="lower bounds on the mean deviation")
    common(sp, "out_bound")
    panel_flags(sp)
    for k in ("mu2", "mu3", "mu4", "mu5", "mean"):
        sp.add_argument(f"--{k}", type=float)
    sp.add_argument("--moments", help="JSON with mu2, mu3[, mu4, mu5, mean] (or a moments.json)")
    sp.set_defaults(func=cmd_bound)

    sp = sub.add_parser("fit-dist", help="fit the deviation family to one moment triple")
    common(sp, "out_fit")
    fit_flags(sp)
    sp.add_argument("--mu2", type=float, required=True)
    sp.add_argument("--mu3", type=float, required=True)
    sp.add_argument("--mu4", type=float, required=True)
    sp.add_argument("--n-eff", type=float, required=True)
    sp.set_defaults(func=cmd_fit_dist)

    sp = sub.add_parser("check-feasibility", help="Hankel determinant check of a moment sequence")
    common(sp, "out_feasibility")
    sp.add_argument("--raw", help="m1,m2,...")
    sp.add_argument("--central", help="mean,mu2,mu3,...")
    sp.add_argument("--order", type=int)
    sp.set_defaults(func=cmd_check_feasibility)

    sp = sub.add_parser("simulate", help="Monte Carlo experiment")
    common(sp, "out_simulate")
    fit_flags(sp)
    sp.add_argument("--design", help="JSON: one design, a list, or {designs, grid, estimators}")
    sp.add_argument("--reps", type=int)
    sp.add_argument("--n", type=int, nargs="+", help="panel sizes; crosses every design")
    sp.add_argument("--grid-size", type=int, help="k x k log grid over [-2, 2]^2 replacing (a, b)")
    sp.add_argument("--truth", choices=["analytic", "reference"])
    sp.add_argument("--full-grid", action="store_true", help="80x80 grid with 150 replications")
    sp.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, PanelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DegeneratePanelError, bounds.DomainError) as exc:
        print(f"error: {type(exc).__module__.split('.')[-1]}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {type(exc).__module__}.{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # anything unexpected is reported as an internal failure
        log.debug("unhandled", exc_info=True)
        print(f"internal failure: {type(exc).__module__}.{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
