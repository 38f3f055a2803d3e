"""Command-line interface: ``linkfit {fit,test,simulate,spline}``.

Exit codes: 0 on success, 1 on errors (including usage errors), 2 when EM
stopped at the iteration cap without converging.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from datetime import datetime, timezone
from importlib import metadata

import numpy as np

from . import families as fam
from .data import LinkedDataset, Schema, ingest_csv, write_csv
from .em import FitConfig, UNSUPERVISED, run_em
from .inference import (
    CovarianceEstimate, bootstrap_covariance, model_covariance, sandwich_covariance, split_lrt,
)
from .simulation import SCENARIOS, ScenarioSpec, generate, run_replications, sine_data
from .spline import build_spline, run_gibbs

SCHEMA_VERSION = "1.0"
EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2

log = logging.getLogger("linkfit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv_list(s):
    return [c for c in s.split(",") if c] if s else []


def _add_data_args(p):
    p.add_argument("data", nargs="?", help="input CSV with a header row")
    p.add_argument("--family", choices=fam.LINEAR_FAMILIES + ("cox", "mvnormal", "contingency"))
    p.add_argument("--outcome", help="outcome column(s), comma-separated for mvnormal")
    p.add_argument("--covariates", default="", help="comma-separated covariate columns")
    p.add_argument("--match-covariates", default="", help="comma-separated columns entering h")
    p.add_argument("--event", help="event indicator column (cox)")
    p.add_argument("--block", help="block id column")
    p.add_argument("--known-match", help="column flagging records known to be correct")
    p.add_argument("--categorical", default="", help="covariate columns to encode as levels")
    p.add_argument("--intercept", action="store_true", help="prepend an intercept column")
    p.add_argument("--marginal", choices=("kde", "empirical", "gaussian", "nelson-aalen", "mixture"))
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--match-design", default="intercept",
                   help="intercept, z, block, none or fixed:<rate>")
    p.add_argument("--mismatch-bound", type=float, help="upper bound on the mean mismatch logit")
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-8)


def _add_common(p):
    p.add_argument("--config", help="JSON file whose keys override the flags")
    p.add_argument("--out", help="output path (default: stdout)")
    p.add_argument("--timestamp", action="store_true",
                   help="record the wall-clock time (makes output non-reproducible)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="linkfit", description="Regression and inference on linked files with mismatch error.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("fit", help="fit the mismatch-adjusted model by EM")
    _add_data_args(p)
    p.add_argument("--bootstrap", type=int, default=0, metavar="B",
                   help="bootstrap replicates for the covariance (required for SEs of cox/mvnormal/contingency)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--posteriors", action="store_true", help="include per-record mismatch probabilities")
    _add_common(p)

    p = sub.add_parser("test", help="split likelihood ratio test of zero mismatch error")
    _add_data_args(p)
    p.add_argument("--level", type=float, default=0.05)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--swap-average", action="store_true")
    _add_common(p)

    p = sub.add_parser("simulate", help="Monte-Carlo replications of a scenario")
    p.add_argument("--scenario", choices=SCENARIOS, default="poisson-constant")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--reps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int)
    p.add_argument("--data-out", help="write replication --rep as CSV instead of running the study")
    p.add_argument("--rep", type=int, default=0)
    _add_common(p)

    p = sub.add_parser("spline", help="Bayesian penalised spline with mismatch adjustment")
    p.add_argument("data", nargs="?", help="CSV input; without it the sine design is simulated")
    p.add_argument("--x", default="x", help="predictor column")
    p.add_argument("--y", default="y", help="response column")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--shuffle", type=float, default=0.2)
    p.add_argument("--knots", type=int, default=25)
    p.add_argument("--iters", type=int, default=10000)
    p.add_argument("--burn-in", type=int, default=100)
    p.add_argument("--thin", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma-ratio", type=float)
    p.add_argument("--grid", type=int, default=200, help="number of curve grid points")
    p.add_argument("--draws", help="CSV path for the retained draws")
    _add_common(p)
    return parser


def _apply_config(args):
    if not getattr(args, "config", None):
        return args
    with open(args.config) as fh:
        overrides = json.load(fh)
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise UsageError(f"unknown config key {key!r}")
        setattr(args, dest, value)
    return args


def _config_echo(args):
    skip = {"config", "out", "verbose", "timestamp"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _clean(obj):
    """Make ``obj`` JSON-safe: arrays to lists, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _document(args, command, body):
    prov = {"package_version": _version(), "config": _config_echo(args)}
    if args.timestamp:
        prov["timestamp"] = datetime.now(timezone.utc).isoformat()
    doc = {"schema_version": SCHEMA_VERSION, "command": command, **body, "provenance": prov}
    return _clean(doc)


def _emit(text, path):
    if path:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _dump(doc, path):
    _emit(json.dumps(doc, indent=2, sort_keys=True) + "\n", path)


def _load_data(args):
    if not args.data:
        raise UsageError("an input CSV is required")
    if not args.family:
        raise UsageError("--family is required")
    if not args.outcome:
        raise UsageError("--outcome is required")
    if args.family == "cox" and not args.event:
        raise UsageError("the cox family requires --event")
    if args.family == "contingency" and not str(args.match_design).startswith("fixed"):
        raise UsageError("the contingency family requires --match-design fixed:<rate>")
    outcome = _csv_list(args.outcome)
    schema = Schema(
        outcome=outcome[0] if len(outcome) == 1 and args.family != "mvnormal" else tuple(outcome),
        covariates=tuple(_csv_list(args.covariates)),
        match_covariates=tuple(_csv_list(args.match_covariates)),
        event=args.event, block=args.block, known_match=args.known_match,
        intercept=bool(args.intercept), categorical=tuple(_csv_list(args.categorical)),
    )
    return ingest_csv(args.data, schema, args.family)


def _fit_config(args):
    return FitConfig(max_iter=args.max_iter, tol=args.tol, match_design=args.match_design,
                     marginal=args.marginal, bandwidth=args.bandwidth,
                     mismatch_bound=args.mismatch_bound)


def _family_parameters(p):
    if isinstance(p, fam.GaussianParams):
        return {"sigma2": p.sigma2}
    if isinstance(p, fam.GLMParams):
        out = {"separated": p.separated}
        if p.family == "gamma":
            out["sigma"] = p.sigma
        return out
    if isinstance(p, fam.CoxParams):
        return {"baseline_times": p.times, "baseline_hazard_jumps": p.jumps, "monotone": p.monotone}
    if isinstance(p, fam.MVNormalParams):
        return {"Sigma": p.sigma, "Gamma": p.gamma_cov}
    return {"pi": p.pi, "psi_row": p.psi_row, "psi_col": p.psi_col}


def cmd_fit(args):
    ds = _load_data(args)
    config = _fit_config(args)
    fit = run_em(ds, config)
    cov, naive_cov = None, None
    if args.bootstrap:
        cov = bootstrap_covariance(ds, config, B=args.bootstrap, seed=args.seed)
    elif ds.family in fam.LINEAR_FAMILIES:
        cov = sandwich_covariance(fit, ds) if config.match_design.kind != "none" \
            else model_covariance(fit.params, ds)
    if ds.family in fam.LINEAR_FAMILIES:
        naive_cov = model_covariance(fam.naive_fit(ds), ds)
    if cov is None:
        names = list(ds.x_names) if ds.family == "cox" else []
        vec = np.asarray(fit.params.beta) if ds.family == "cox" else np.zeros(0)
        gnames = config.match_design.names(ds)
        cov = CovarianceEstimate(names + gnames, np.concatenate([vec, fit.match.gamma]),
                                 np.full((len(names) + len(gnames),) * 2, np.nan), "none")
    body = {
        "family": ds.family,
        "n": ds.n,
        "converged": fit.converged,
        "n_iter": fit.n_iter,
        "restarted": fit.restarted,
        "notes": fit.notes,
        "estimates": cov.to_dict()["parameters"],
        "covariance_method": cov.method,
        "covariance": cov.cov,
        "family_parameters": _family_parameters(fit.params),
        "match_design": str(config.match_design),
        "mismatch_rate": fit.mismatch_rate,
        "posterior_mismatch_rate": fit.posterior_mismatch_rate,
        "pll": fit.pll,
        "pll_trace": fit.pll_trace,
    }
    if naive_cov is not None:
        body["naive"] = naive_cov.to_dict()["parameters"]
    if args.posteriors:
        body["mismatch_posterior"] = fit.mhat
    _dump(_document(args, "fit", body), args.out)
    return EXIT_OK if fit.converged else EXIT_NOT_CONVERGED


def cmd_test(args):
    ds = _load_data(args)
    res = split_lrt(ds, _fit_config(args), level=args.level, split_seed=args.split_seed,
                    swap_average=args.swap_average)
    body = {"family": ds.family, "n": ds.n, "test": res.to_dict()}
    _dump(_document(args, "test", body), args.out)
    return EXIT_OK


def cmd_simulate(args):
    spec = ScenarioSpec(args.scenario, args.alpha, args.n, args.reps, args.seed)
    if args.data_out:
        draw = generate(spec, args.rep)
        write_csv(draw.data, args.data_out)
        body = {"scenario": spec.to_dict(), "rep": args.rep, "data": args.data_out,
                "true_beta": draw.beta, "true_gamma": draw.gamma,
                "n_mismatched": int(draw.m.sum())}
        _dump(_document(args, "simulate", body), args.out)
        return EXIT_OK
    table = run_replications(spec, workers=args.workers)
    if args.out:
        table.write_csv(args.out)
        side = args.out.rsplit(".", 1)[0] + ".json"
        _dump(_document(args, "simulate", {"summary": table.to_dict()}), side)
    else:
        _dump(_document(args, "simulate", {"summary": table.to_dict()}), None)
    return EXIT_OK


def _read_xy(path, xcol, ycol):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return (np.array([float(r[xcol]) for r in rows]), np.array([float(r[ycol]) for r in rows]))
    except KeyError as exc:
        raise UsageError(f"column {exc.args[0]!r} not found in {path}") from None


def cmd_spline(args):
    if args.data:
        x, y = _read_xy(args.data, args.x, args.y)
    else:
        x, y, _, _ = sine_data(args.n, args.shuffle, rng=args.seed)
    spline = build_spline(x, n_knots=args.knots)
    grid = np.linspace(*spline.interval, args.grid)
    draws = run_gibbs(x, y, spline, iters=args.iters, burn_in=args.burn_in, thin=args.thin,
                      seed=args.seed, grid=grid, sigma_ratio=args.sigma_ratio)
    if args.draws:
        with open(args.draws, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            d = draws.beta.shape[1]
            wr.writerow(["alpha", "sigma2", "tau2"] + [f"beta{j + 1}" for j in range(d)])
            for i in range(draws.alpha.size):
                wr.writerow([repr(float(v)) for v in
                             (draws.alpha[i], draws.sigma2[i], draws.tau2[i], *draws.beta[i])])
    body = {"summary": draws.summary(), "curve": draws.curve(),
            "knots": args.knots, "n": int(x.size)}
    _dump(_document(args, "spline", body), args.out)
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "test": cmd_test, "simulate": cmd_simulate, "spline": cmd_spline}


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config(parser.parse_args(argv))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:
        print(f"error ({type(exc).__module__}): {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
