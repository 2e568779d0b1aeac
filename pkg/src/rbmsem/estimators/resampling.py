"""Bootstrap and jackknife bias corrections of the ML estimator."""
from __future__ import annotations

import time

import numpy as np

from ..likelihood import LikelihoodEngine, as_dataset
from ..model import load_spec
from .ml import fit_ml, fitted_nu
from .optim import INFEASIBLE_ERRORS
from .results import FitResult, check_acceptable, default_bounds

DEFAULT_REPLICATES = 200
MAX_JACKKNIFE_FAILURES = 0.2
REPLICATE_FILTERS = ("acceptable", "converged", "strict")


def _replicate_ok(fit: FitResult, keep: str) -> bool:
    return fit.converged if keep == "converged" else fit.acceptable


def _replicate_fit(spec, y, start, threshold):
    eng = LikelihoodEngine(spec, y)
    bounds = default_bounds(spec, eng.summary)
    return fit_ml(spec, y, engine=eng, bounds=bounds, start=bounds.clip(start), threshold=threshold)


def _trimmed_mean_sd(reps: np.ndarray, trim):
    """Per-parameter mean and SD of replicates, optionally inside quantile limits."""
    if trim is None:
        sd = reps.std(axis=0, ddof=1) if len(reps) > 1 else np.full(reps.shape[1], np.nan)
        return reps.mean(axis=0), sd
    lo_q, hi_q = trim
    means, sds = [], []
    for col in reps.T:
        lo, hi = np.quantile(col, [lo_q, hi_q])
        kept = col[(col >= lo) & (col <= hi)]
        means.append(kept.mean())
        sds.append(kept.std(ddof=1) if len(kept) > 1 else np.nan)
    return np.array(means), np.array(sds)


def _rejected(name, spec, ml, t0, info):
    fit = FitResult(name, ml.theta_hat, np.full(spec.m, np.nan), ml.loglik, converged=False,
                    iterations=ml.iterations, nu_hat=ml.nu_hat, info=info)
    fit = check_acceptable(fit, spec)
    fit.wall_time = time.perf_counter() - t0
    return fit


def _corrected(name, spec, eng, theta, se, ml, t0, threshold, info):
    try:
        ll = float(eng.loglik(theta)[0])
    except INFEASIBLE_ERRORS:  # inadmissible corrected estimate; screened below
        ll = float("nan")
    fit = FitResult(name, spec.param_vector(theta), se, ll, converged=True, iterations=ml.iterations,
                    nu_hat=fitted_nu(spec, eng, theta), info=info)
    fit = check_acceptable(fit, spec, threshold)
    fit.wall_time = time.perf_counter() - t0
    return fit


def bootstrap_correct(spec, data, T: int = DEFAULT_REPLICATES, *, trim=None, seed: int = 0,
                      keep: str = "acceptable", ml: FitResult | None = None, resamples=None,
                      threshold: float | None = None) -> FitResult:
    """Nonparametric bootstrap bias correction ``2 theta_ml - mean(theta*)``.

    Parameters
    ----------
    spec : ModelSpec or preset name
    data : ndarray (n, p)
    T : int
        Number of resamples.
    trim : (float, float), optional
        Quantile limits; replicate estimates outside them are discarded
        per parameter before averaging, e.g. ``(0.005, 0.995)``.
    seed : int or sequence of int
        Resample ``t`` draws from the stream ``(*seed, t)``.
    keep : {"acceptable", "converged", "strict"}
        Which replicate fits enter the average.  ``"acceptable"`` drops any
        resample whose ML fit fails the acceptability screen; ``"strict"``
        rejects the whole correction if any resample fails it.
    ml : FitResult, optional
        ML fit on the full data.
    resamples : array of int (T, n), optional
        Explicit row indices of each resample, overriding ``seed``.

    Returns
    -------
    FitResult
        Standard errors are the standard deviations of the retained
        replicates; ``info`` records how many resamples were dropped.
    """
    t0 = time.perf_counter()
    spec = load_spec(spec)
    if keep not in REPLICATE_FILTERS:
        raise ValueError(f"keep must be one of {REPLICATE_FILTERS}")
    y = as_dataset(data)
    n = y.shape[0]
    if resamples is not None:
        resamples = np.asarray(resamples, dtype=int)
        if resamples.ndim != 2 or resamples.shape[1] != n:
            raise ValueError("resamples must be a T x n array of row indices")
        T = resamples.shape[0]
    if T < 1:
        raise ValueError("T must be at least 1")
    eng = LikelihoodEngine(spec, y)
    ml = fit_ml(spec, y, engine=eng, threshold=threshold) if ml is None else ml
    info = {"replicates": int(T), "dropped": 0}
    if not ml.converged:
        return _rejected("Boot", spec, ml, t0, info)

    seed_key = [int(v) for v in np.atleast_1d(seed)]
    reps = []
    for t in range(T):
        idx = resamples[t] if resamples is not None else np.random.default_rng([*seed_key, t]).integers(0, n, n)
        try:
            rep = _replicate_fit(spec, y[idx], ml.values, threshold)
        except ValueError:  # e.g. a resample with a constant column
            continue
        if _replicate_ok(rep, keep):
            reps.append(rep.values)
    info["dropped"] = int(T - len(reps))
    if not reps or (keep == "strict" and info["dropped"]):
        return _rejected("Boot", spec, ml, t0, info)
    mean, sd = _trimmed_mean_sd(np.array(reps), trim)
    return _corrected("Boot", spec, eng, 2.0 * ml.values - mean, sd, ml, t0, threshold, info)


def jackknife_correct(spec, data, *, keep: str = "acceptable", ml: FitResult | None = None,
                      threshold: float | None = None) -> FitResult:
    """Leave-one-out jackknife bias correction ``n theta_ml - (n - 1) mean(theta_(i))``.

    Leave-one-out fits that fail the screen are excluded and the mean taken
    over the rest; more than 20% failures rejects the estimate, as does any
    failure with ``keep="strict"``.  Standard
    errors are ``sqrt((n - 1) / R * sum (theta_(i) - mean)^2)`` over the R
    retained fits.
    """
    t0 = time.perf_counter()
    spec = load_spec(spec)
    if keep not in REPLICATE_FILTERS:
        raise ValueError(f"keep must be one of {REPLICATE_FILTERS}")
    y = as_dataset(data)
    n = y.shape[0]
    if n < spec.m + 2:
        raise ValueError(f"jackknife needs at least m + 2 = {spec.m + 2} observations")
    eng = LikelihoodEngine(spec, y)
    ml = fit_ml(spec, y, engine=eng, threshold=threshold) if ml is None else ml
    info = {"replicates": int(n), "dropped": 0}
    if not ml.converged:
        return _rejected("Jack", spec, ml, t0, info)

    reps = []
    for i in range(n):
        try:
            rep = _replicate_fit(spec, np.delete(y, i, axis=0), ml.values, threshold)
        except ValueError:
            continue
        if _replicate_ok(rep, keep):
            reps.append(rep.values)
    info["dropped"] = int(n - len(reps))
    if not reps or info["dropped"] > MAX_JACKKNIFE_FAILURES * n or (keep == "strict" and info["dropped"]):
        return _rejected("Jack", spec, ml, t0, info)
    reps = np.array(reps)
    mean = reps.mean(axis=0)
    se = np.sqrt((n - 1) / len(reps) * np.sum((reps - mean) ** 2, axis=0))
    return _corrected("Jack", spec, eng, n * ml.values - (n - 1) * mean, se, ml, t0, threshold, info)
