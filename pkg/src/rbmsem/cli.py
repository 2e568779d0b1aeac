"""Command-line interface: ``rbmsem {fit,simulate,grid,report}``.

Machine-readable output goes to stdout (or ``--output``), diagnostics to
stderr.  Exit status is 0 on success, 2 when a fit ran but was rejected by
the acceptability screen, and 1 on errors.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys
from pathlib import Path

import numpy as np

from .datagen import DistributionSpec, simulate
from .estimators import (
    bootstrap_correct, fit_erbm, fit_irbm, fit_ml, fit_reml_gcm, jackknife_correct,
)
from .model import SpecError, load_spec
from .presets import RELIABILITIES, get_preset, true_theta
from .simstudy import CSV_COLUMNS, GridConfig, read_results, run_grid

EXIT_OK, EXIT_ERROR, EXIT_REJECTED = 0, 1, 2
ESTIMATOR_CHOICES = ("ml", "erbm", "irbm", "boot", "jack", "reml")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors share the generic error status; 2 means "fit rejected"
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def read_data(path) -> np.ndarray:
    """Numeric CSV, with or without a header row."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read data file {path}: {exc.strerror}") from None
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if rows:
        try:
            [float(v) for v in rows[0]]
        except ValueError:
            rows = rows[1:]
    try:
        y = np.array([[float(v) for v in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise CliError(f"non-numeric value in {path}: {exc}") from None
    if y.ndim != 2 or y.shape[0] == 0:
        raise CliError(f"no data rows in {path}")
    return y


def _emit(text: str, output):
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


def _table(rows, columns, fmt) -> str:
    if fmt == "json":
        return json.dumps(rows, indent=2) + "\n"
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def cmd_fit(args) -> int:
    try:
        spec = load_spec(args.model)
    except SpecError as exc:
        raise CliError(str(exc)) from None
    if args.estimator == "reml" and spec.name != "gcm":
        raise CliError("REML is only supported for the growth curve model (gcm)")
    y = read_data(args.data)
    if y.shape[1] != spec.p:
        raise CliError(f"data have {y.shape[1]} columns, model {spec.name} expects {spec.p}")
    est = args.estimator
    if est == "ml":
        fit = fit_ml(spec, y, seed=args.seed)
    elif est == "erbm":
        fit = fit_erbm(spec, y)
    elif est == "irbm":
        fit = fit_irbm(spec, y, seed=args.seed)
    elif est == "boot":
        fit = bootstrap_correct(spec, y, T=args.bootstrap_T, seed=args.seed)
    elif est == "jack":
        fit = jackknife_correct(spec, y)
    else:
        fit = fit_reml_gcm(y, spec)
    if args.format == "json":
        text = fit.to_json(indent=2) + "\n"
    else:
        rows = [{"parameter": lab, "estimate": repr(float(v)), "se": repr(float(s))}
                for lab, v, s in zip(fit.theta_hat.labels, fit.values, fit.se)]
        text = _table(rows, ["parameter", "estimate", "se"], "csv")
    _emit(text, args.output)
    if not fit.acceptable:
        print(f"fit rejected: {fit.rejection_reason}", file=sys.stderr)
        return EXIT_REJECTED
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        spec = get_preset(args.model)
    except SpecError as exc:
        raise CliError(str(exc)) from None
    try:
        dist = DistributionSpec.parse(args.dist)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    theta = true_theta(spec, args.reliability)
    try:
        y = simulate(spec, theta.values, args.n, dist, seed=args.seed)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    header = [f"y{i + 1}" for i in range(spec.p)]
    if args.format == "json":
        text = json.dumps({"columns": header, "data": y.tolist()}) + "\n"
    else:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows([[repr(float(v)) for v in row] for row in y])
        text = buf.getvalue()
    _emit(text, args.output)
    if args.output:
        manifest = {
            "model": spec.name, "n": args.n, "reliability": args.reliability, "seed": args.seed,
            "dist": {"skewness": dist.skewness, "excess_kurtosis": dist.excess_kurtosis},
            "theta": theta.as_dict(),
        }
        Path(str(args.output) + ".json").write_text(json.dumps(manifest, indent=2))
    return EXIT_OK


def cmd_grid(args) -> int:
    try:
        cfg = GridConfig.load(args.config)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    if args.output:
        cfg = dataclasses.replace(cfg, output_dir=Path(args.output))
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, master_seed=args.seed)
    path = run_grid(cfg, jobs=args.jobs)
    print(str(path))
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        rows = read_results(args.results)
    except OSError as exc:
        raise CliError(f"cannot read results {args.results}: {exc.strerror}") from None
    for key in ("model", "estimator", "parameter"):
        want = getattr(args, key)
        if want:
            rows = [r for r in rows if r[key] == want]
    _emit(_table(rows, list(CSV_COLUMNS), args.format), args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rbmsem", description="SEM fitting with reduced-bias estimators.")
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p, seed_default=0, fmt="csv"):
        p.add_argument("--seed", type=int, default=seed_default, help="random seed")
        p.add_argument("--output", "-o", help="write output to this path instead of stdout")
        p.add_argument("--format", choices=("csv", "json"), default=fmt)

    p = sub.add_parser("fit", help="fit a model to a CSV dataset")
    p.add_argument("model", help="preset name (two_factor, gcm) or JSON model file")
    p.add_argument("data", help="CSV file, one column per indicator")
    p.add_argument("--estimator", "-e", choices=ESTIMATOR_CHOICES, default="ml")
    p.add_argument("--bootstrap-T", dest="bootstrap_T", type=int, default=200)
    shared(p, fmt="json")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="draw a dataset from a preset at its population values")
    p.add_argument("model", choices=("two_factor", "gcm"))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--reliability", choices=RELIABILITIES, default="high")
    p.add_argument("--dist", default="normal", help='"normal", "nonnormal" or "skew,kurtosis"')
    shared(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("grid", help="run a simulation grid from a JSON configuration")
    p.add_argument("config")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")
    shared(p, seed_default=None)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="filter and print a results table")
    p.add_argument("results")
    p.add_argument("--model")
    p.add_argument("--estimator")
    p.add_argument("--parameter")
    shared(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
