"""Monte Carlo simulation study: cells, replications, performance metrics and the grid runner."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import NORMAL, DistributionSpec, simulate
from .estimators import (
    bootstrap_correct, fit_erbm, fit_irbm, fit_ml, fit_reml_gcm, jackknife_correct,
)
from .estimators.results import ESTIMATORS
from .likelihood import LikelihoodEngine
from .presets import PRESETS, RELIABILITIES, get_preset, true_theta

DEFAULT_NS = (15, 20, 50, 100, 1000)
DEFAULT_REPLICATIONS = 200
Z95 = 1.959963984540054

CSV_COLUMNS = (
    "model", "n", "reliability", "dist", "estimator", "parameter", "R", "acceptance_rate",
    "mean_bias", "rel_mean_bias", "pu", "rmse", "coverage", "mc_se_bias", "master_seed", "cell",
)


# -- metrics ----------------------------------------------------------------

def _as_estimates(estimates) -> np.ndarray:
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        raise ValueError("need at least one estimate")
    return est


def mean_bias(estimates, truth) -> float:
    """``mean(estimates) - truth``."""
    return float(np.mean(_as_estimates(estimates)) - truth)


def rel_mean_bias(estimates, truth) -> float:
    """``mean(estimates) / truth - 1``; NaN (undefined) when the truth is 0."""
    est = _as_estimates(estimates)
    if truth == 0:
        return float("nan")
    return float(np.sum(est) / (len(est) * truth) - 1.0)


def prob_underestimate(estimates, truth) -> float:
    """Share of estimates strictly below the truth; ties are not underestimates."""
    return float(np.mean(_as_estimates(estimates) < truth))


def rmse(estimates, truth) -> float:
    return float(np.sqrt(np.mean((_as_estimates(estimates) - truth) ** 2)))


def coverage(estimates, ses, truth, return_excluded=False):
    """Share of 95% Wald intervals ``est -+ 1.96 se`` that contain the truth.

    Replications with a non-positive or missing SE are left out; with
    ``return_excluded`` their count is returned as well.
    """
    est = _as_estimates(estimates)
    se = np.asarray(ses, dtype=float)
    valid = np.isfinite(se) & (se > 0) & np.isfinite(est)
    excluded = int(np.sum(~valid))
    if valid.any():
        hit = (est[valid] - Z95 * se[valid] <= truth) & (truth <= est[valid] + Z95 * se[valid])
        cov = float(np.mean(hit))
    else:
        cov = float("nan")
    return (cov, excluded) if return_excluded else cov


def mc_se(estimates) -> float:
    """Monte Carlo standard error of the mean bias, ``sd(estimates) / sqrt(R)``."""
    est = _as_estimates(estimates)
    if len(est) < 2:
        return float("nan")
    return float(np.std(est, ddof=1) / np.sqrt(len(est)))


# -- one cell ---------------------------------------------------------------

@dataclass(frozen=True)
class SimSetting:
    """One cell of the experimental grid.

    Replication ``r`` draws its data from the seed stream ``(seed, cell, r)``;
    all estimators of a replication see the same dataset.
    """

    model: str
    n: int
    reliability: str = "high"
    dist: DistributionSpec = NORMAL
    replications: int = DEFAULT_REPLICATIONS
    seed: int = 0
    estimators: tuple = ("ML", "eRBM", "iRBM")
    bootstrap_T: int = 200
    cell: int = 0

    def __post_init__(self):
        if self.model not in PRESETS:
            raise ValueError(f"model must be one of {PRESETS}")
        if self.reliability not in RELIABILITIES:
            raise ValueError(f"reliability must be one of {RELIABILITIES}")
        object.__setattr__(self, "dist", DistributionSpec.parse(self.dist))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if not self.estimators:
            raise ValueError("no estimators requested")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise ValueError(f"unknown estimators {sorted(unknown)}")
        if "REML" in self.estimators and self.model != "gcm":
            raise ValueError("REML is only available for the growth curve model")
        if self.n < 2 or self.replications < 1:
            raise ValueError("n must be at least 2 and replications at least 1")

    def data_seed(self, rep: int) -> np.random.SeedSequence:
        return np.random.SeedSequence([self.seed, self.cell, rep])

    def to_dict(self) -> dict:
        return {
            "model": self.model, "n": self.n, "reliability": self.reliability,
            "dist": [self.dist.skewness, self.dist.excess_kurtosis], "replications": self.replications,
            "seed": self.seed, "estimators": list(self.estimators), "bootstrap_T": self.bootstrap_T,
            "cell": self.cell,
        }


@dataclass
class EstimatorRecord:
    """Per-replication outcome of one estimator (NaN rows where nothing was estimated)."""

    estimates: np.ndarray
    ses: np.ndarray
    accepted: np.ndarray
    reasons: list
    wall_times: np.ndarray

    @classmethod
    def empty(cls, reps, m):
        return cls(np.full((reps, m), np.nan), np.full((reps, m), np.nan), np.zeros(reps, bool),
                   ["none"] * reps, np.zeros(reps))


@dataclass
class SimMetrics:
    """Raw replication records and performance metrics of one cell."""

    setting: SimSetting
    labels: tuple
    truth: np.ndarray
    records: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    wall_time: float = 0.0

    def accepted_estimates(self, estimator) -> np.ndarray:
        rec = self.records[estimator]
        return rec.estimates[rec.accepted]

    def acceptance_rate(self, estimator) -> float:
        return float(np.mean(self.records[estimator].accepted))

    def metric(self, estimator, parameter) -> dict:
        """All metrics of one (estimator, parameter) pair over accepted replications."""
        a = self.labels.index(parameter)
        rec = self.records[estimator]
        est = rec.estimates[rec.accepted, a]
        truth = float(self.truth[a])
        out = {"R": int(len(est)), "acceptance_rate": self.acceptance_rate(estimator)}
        if len(est) == 0:
            out.update(available=False, mean_bias=math.nan, rel_mean_bias=math.nan, pu=math.nan,
                       rmse=math.nan, coverage=math.nan, mc_se_bias=math.nan)
            return out
        out.update(
            available=True,
            mean_bias=mean_bias(est, truth),
            rel_mean_bias=rel_mean_bias(est, truth),
            pu=prob_underestimate(est, truth),
            rmse=rmse(est, truth),
            coverage=coverage(est, rec.ses[rec.accepted, a], truth),
            mc_se_bias=mc_se(est),
        )
        return out

    def rows(self) -> list:
        s = self.setting
        out = []
        for est in s.estimators:
            if est not in self.records:
                continue
            for lab in self.labels:
                met = self.metric(est, lab)
                out.append({
                    "model": s.model, "n": s.n, "reliability": s.reliability, "dist": s.dist.label,
                    "estimator": est, "parameter": lab, "R": met["R"], "acceptance_rate": met["acceptance_rate"],
                    "mean_bias": met["mean_bias"], "rel_mean_bias": met["rel_mean_bias"], "pu": met["pu"],
                    "rmse": met["rmse"], "coverage": met["coverage"], "mc_se_bias": met["mc_se_bias"],
                    "master_seed": s.seed, "cell": s.cell,
                })
        return out


FIT_ERRORS = (ArithmeticError, ValueError, np.linalg.LinAlgError)


def _fit_all(setting: SimSetting, spec, y, rep):
    eng = LikelihoodEngine(spec, y)
    fits = {}
    ml = fit_ml(spec, y, engine=eng)
    fits["ML"] = ml
    for est in setting.estimators:
        if est == "eRBM":
            fits[est] = fit_erbm(spec, y, ml=ml, engine=eng)
        elif est == "iRBM":
            fits[est] = fit_irbm(spec, y, ml=ml, engine=eng)
        elif est == "Boot":
            fits[est] = bootstrap_correct(spec, y, T=setting.bootstrap_T, ml=ml,
                                           seed=(setting.seed, setting.cell, rep, 1))
        elif est == "Jack":
            fits[est] = jackknife_correct(spec, y, ml=ml)
        elif est == "REML":
            fits[est] = fit_reml_gcm(y, spec)
    return fits


def run_cell(setting: SimSetting, progress=None) -> SimMetrics:
    """Simulate and fit every replication of one cell.

    Metrics use the accepted replications only.  A fit that raises is
    recorded as a rejected replication (reason ``no_convergence``) and noted
    in ``failures``.
    """
    t0 = time.perf_counter()
    spec = get_preset(setting.model)
    truth = true_theta(spec, setting.reliability).values
    reps, m = setting.replications, spec.m
    records = {est: EstimatorRecord.empty(reps, m) for est in setting.estimators}
    failures = []
    for r in range(reps):
        y = simulate(spec, truth, setting.n, setting.dist, seed=setting.data_seed(r))
        try:
            fits = _fit_all(setting, spec, y, r)
        except FIT_ERRORS as exc:
            failures.append({"replication": r, "error": f"{type(exc).__name__}: {exc}"})
            for est in setting.estimators:
                records[est].reasons[r] = "no_convergence"
            continue
        for est in setting.estimators:
            fit = fits[est]
            rec = records[est]
            rec.estimates[r] = fit.values
            rec.ses[r] = fit.se
            rec.accepted[r] = fit.acceptable
            rec.reasons[r] = fit.rejection_reason
            rec.wall_times[r] = fit.wall_time
        if progress is not None:
            progress(r + 1, reps)
    return SimMetrics(setting, spec.labels, truth, records, failures, time.perf_counter() - t0)


# -- grid -------------------------------------------------------------------

@dataclass(frozen=True)
class GridConfig:
    models: tuple
    ns: tuple
    reliabilities: tuple
    dists: tuple
    replications: int
    estimators: tuple
    bootstrap_T: int
    master_seed: int
    output_dir: Path

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> "GridConfig":
        try:
            models = tuple(doc.get("models", PRESETS))
            ns = tuple(int(n) for n in doc.get("ns", DEFAULT_NS))
            rels = tuple(doc.get("reliabilities", RELIABILITIES))
            dists = tuple(DistributionSpec.parse(d) for d in doc.get("dists", ["normal", "nonnormal"]))
            estimators = tuple(doc.get("estimators", ("ML", "eRBM", "iRBM")))
            out = Path(doc.get("output_dir", "results"))
            cfg = cls(models, ns, rels, dists, int(doc.get("replications", DEFAULT_REPLICATIONS)),
                      estimators, int(doc.get("bootstrap_T", 200)), int(doc.get("master_seed", 0)),
                      out if out.is_absolute() or base_dir is None else Path(base_dir) / out)
        except (TypeError, ValueError, KeyError) as exc:
            raise ValueError(f"invalid grid configuration: {exc}") from None
        if not (cfg.models and cfg.ns and cfg.reliabilities and cfg.dists):
            raise ValueError("invalid grid configuration: empty grid dimension")
        if not cfg.estimators:
            raise ValueError("invalid grid configuration: no estimators")
        cfg.settings()  # validates every cell
        return cfg

    @classmethod
    def load(cls, path) -> "GridConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read grid configuration {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ValueError("invalid grid configuration: expected a JSON object")
        return cls.from_dict(doc, base_dir=path.parent)

    def to_dict(self) -> dict:
        return {
            "models": list(self.models), "ns": list(self.ns), "reliabilities": list(self.reliabilities),
            "dists": [[d.skewness, d.excess_kurtosis] for d in self.dists],
            "replications": self.replications, "estimators": list(self.estimators),
            "bootstrap_T": self.bootstrap_T, "master_seed": self.master_seed,
        }

    def settings(self) -> list:
        """Cells in model, n, reliability, distribution order.  REML is dropped for non-growth models."""
        cells = []
        for model in self.models:
            ests = tuple(e for e in self.estimators if e != "REML" or model == "gcm")
            for n in self.ns:
                for rel in self.reliabilities:
                    for dist in self.dists:
                        cells.append(SimSetting(model, n, rel, dist, self.replications, self.master_seed,
                                                ests, self.bootstrap_T, len(cells)))
        return cells


def _setting_key(setting: SimSetting) -> str:
    return hashlib.sha256(json.dumps(setting.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _run_cell_rows(setting: SimSetting):
    met = run_cell(setting)
    return met.rows(), met.failures, met.wall_time


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def run_grid(config, jobs: int | None = None, log=_log) -> Path:
    """Run every cell of a grid and write ``results.csv`` and ``manifest.json``.

    Finished cells are checkpointed under ``output_dir/checkpoints`` and
    skipped when the grid is run again with the same settings.  Rows are
    written in cell order, so the CSV does not depend on ``jobs``.

    Returns
    -------
    Path
        The results CSV.
    """
    cfg = config if isinstance(config, GridConfig) else (
        GridConfig.from_dict(config) if isinstance(config, dict) else GridConfig.load(config))
    out = Path(cfg.output_dir)
    ckpt = out / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    settings = cfg.settings()
    results = {}
    todo = []
    for s in settings:
        path = ckpt / f"cell_{s.cell:04d}.json"
        if path.exists():
            try:
                doc = json.loads(path.read_text())
            except json.JSONDecodeError:
                doc = {}
            if doc.get("key") == _setting_key(s):
                results[s.cell] = doc
                log(f"cell {s.cell + 1}/{len(settings)}: checkpoint found, skipped")
                continue
        todo.append(s)

    def store(s, rows, failures, wall):
        doc = {"key": _setting_key(s), "setting": s.to_dict(), "rows": rows, "failures": failures,
               "wall_time": wall}
        tmp = ckpt / f"cell_{s.cell:04d}.json.tmp"
        tmp.write_text(json.dumps(doc))
        os.replace(tmp, ckpt / f"cell_{s.cell:04d}.json")
        results[s.cell] = doc
        log(f"cell {s.cell + 1}/{len(settings)} done: {s.model} n={s.n} {s.reliability} {s.dist.label} "
            f"({wall:.1f}s, {len(failures)} failures)")

    jobs = jobs or os.cpu_count() or 1
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [(s, pool.submit(_run_cell_rows, s)) for s in todo]
            for s, fut in futures:
                store(s, *fut.result())
    else:
        for s in todo:
            store(s, *_run_cell_rows(s))

    csv_path = out / "results.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for s in settings:
            for row in results[s.cell]["rows"]:
                writer.writerow({k: _csv_value(row[k]) for k in CSV_COLUMNS})
    manifest = {
        "version": __version__,
        "config": cfg.to_dict(),
        "cells": [
            {"cell": s.cell, "setting": s.to_dict(), "seed_stream": [s.seed, s.cell],
             "wall_time": results[s.cell]["wall_time"], "failures": len(results[s.cell]["failures"])}
            for s in settings
        ],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return csv_path


def _csv_value(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def read_results(path) -> list:
    """Rows of a results CSV with numeric fields converted."""
    numeric = {"n", "R", "acceptance_rate", "mean_bias", "rel_mean_bias", "pu", "rmse", "coverage",
               "mc_se_bias", "master_seed", "cell"}
    rows = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            for k in numeric & row.keys():
                v = row[k]
                row[k] = math.nan if v == "" else (int(v) if k in {"n", "R", "master_seed", "cell"} else float(v))
            rows.append(row)
    return rows
