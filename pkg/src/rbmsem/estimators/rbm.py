"""Reduced-bias M-estimation: the penalty and its explicit and implicit estimators.

The penalty is ``P(theta) = -tr(j(theta)^-1 e(theta)) / 2`` where ``j`` is the
negative Hessian of the log-likelihood and ``e`` the sum of outer products of
the per-observation scores.  Adding its gradient to the score removes the
first-order bias of the estimating equations.
"""
from __future__ import annotations

import time

import numpy as np

from ..likelihood import LikelihoodEngine
from ..model import _check_theta, load_spec
from .ml import finish_fit, fit_ml, newton_polish
from .optim import INFEASIBLE_ERRORS, maximize
from .results import BoundsPolicy, FitResult, default_bounds, start_values

# the correction step converges linearly at rate O(1/n)
IRBM_POLISH_STEPS = 6


def rbm_penalty(theta, spec, data) -> float:
    """``-tr(j^-1 e) / 2`` at ``theta``.

    ``j`` comes from central differences of the analytic score and ``e`` from
    analytic per-observation scores, so ``data`` must be the raw ``n x p``
    array.
    """
    spec = load_spec(spec)
    theta = _check_theta(theta, spec)
    eng = data if isinstance(data, LikelihoodEngine) else LikelihoodEngine(spec, data)
    return float(eng.penalty(theta)[0])


def rbm_penalty_gradient(theta, spec, data) -> np.ndarray:
    """Central-difference gradient of :func:`rbm_penalty`."""
    spec = load_spec(spec)
    theta = _check_theta(theta, spec)
    eng = data if isinstance(data, LikelihoodEngine) else LikelihoodEngine(spec, data)
    return eng.penalty_and_gradient(theta)[1]


def _ml_first(spec, data, eng, ml, threshold):
    if ml is None:
        ml = fit_ml(spec, data, engine=eng, threshold=threshold)
    return ml


def fit_erbm(spec, data, *, ml: FitResult | None = None, threshold: float | None = None,
             engine: LikelihoodEngine | None = None) -> FitResult:
    """Explicit reduced-bias estimate: one correction step away from the ML estimate.

    ``theta_e = theta_ml + j(theta_ml)^-1 grad P(theta_ml)``.  The step is
    not confined to the ML bounds.  ``wall_time`` includes the ML fit (the
    supplied one's, when ``ml`` is given).

    Parameters
    ----------
    spec : ModelSpec or preset name
    data : ndarray (n, p)
    ml : FitResult, optional
        A previous ML fit on the same data; fitted here when omitted.
    """
    t0 = time.perf_counter()
    spec = load_spec(spec)
    eng = engine if engine is not None else LikelihoodEngine(spec, data)
    supplied_time = ml.wall_time if ml is not None else 0.0
    ml = _ml_first(spec, data, eng, ml, threshold)
    theta = ml.values.copy()
    converged = False
    info = {"ml_converged": ml.converged}
    if ml.converged:
        try:
            pen, grad = eng.penalty_and_gradient(theta)
            j = eng.neg_hessian(theta)[0]
            step = np.linalg.solve(j, grad)
            if np.all(np.isfinite(step)):
                theta = theta + step
                converged = True
                info["ml_penalty"] = float(pen)
        except INFEASIBLE_ERRORS as exc:
            info["failure"] = type(exc).__name__
    fit = finish_fit("eRBM", spec, eng, theta, converged, ml.iterations, t0, threshold, info=info)
    fit.wall_time += supplied_time
    return fit


def _irbm_starts(spec, eng, ml, bounds):
    """Candidate starting points, tried in order until one is feasible and converges.

    A boundary ML estimate often has a singular negative Hessian, where the
    penalized objective is undefined, so points pulled into the interior
    follow the ML estimate and the moment-based start.
    """
    heuristic = start_values(spec, eng.summary, bounds)
    starts = []
    if ml.acceptable and bounds.contains(ml.values):
        starts.append(ml.values)
    starts.append(heuristic)
    if np.all(np.isfinite(ml.values)):
        ml_in = bounds.clip(ml.values)
        if not starts or starts[0] is not ml.values:
            starts.append(ml_in)
        starts.append(bounds.interior(ml_in, frac=0.02))
        starts.append(0.5 * (ml_in + heuristic))
    return starts


def fit_irbm(spec, data, *, ml: FitResult | None = None, bounds: BoundsPolicy | None = None,
             start=None, restarts: int = 3, seed: int = 0, threshold: float | None = None,
             engine: LikelihoodEngine | None = None) -> FitResult:
    """Implicit reduced-bias estimate: maximizer of the penalized log-likelihood ``l + P``.

    The search starts from the ML estimate when it is acceptable, otherwise
    from a moment-based start; when the objective is undefined there or the
    run fails, interior points near the ML estimate are tried.  A start where
    the negative Hessian is not positive definite is first moved by an
    unguarded ascent.  In the main search, points where
    the negative Hessian is not positive definite are treated as infeasible,
    which keeps the search away from spurious maxima where the penalty
    explodes.  A few correction steps ``theta + j^-1 (score + grad P)`` finish
    the run.

    Parameters
    ----------
    spec : ModelSpec or preset name
    data : ndarray (n, p)
    ml : FitResult, optional
        ML fit used as the starting point; fitted here when omitted and no
        ``start`` is given.
    """
    t0 = time.perf_counter()
    spec = load_spec(spec)
    eng = engine if engine is not None else LikelihoodEngine(spec, data)
    bounds = default_bounds(spec, eng.summary) if bounds is None else bounds
    if start is None:
        ml = _ml_first(spec, data, eng, ml, threshold)
        starts = _irbm_starts(spec, eng, ml, bounds)
    else:
        starts = [np.asarray(start, dtype=float)]
    n = eng.n

    def penalized(theta, require_pd=True):
        pen, pgrad = eng.penalty_and_gradient(theta, require_pd=require_pd)
        return eng.loglik(theta)[0] + pen, eng.score(theta)[0] + pgrad

    def scaled(theta):
        f, g = penalized(theta)
        return f / n, g / n

    def scaled_unguarded(theta):
        f, g = penalized(theta, require_pd=False)
        return f / n, g / n

    def feasible(theta):
        try:
            scaled(bounds.clip(theta))
        except INFEASIBLE_ERRORS:
            return False
        return True

    opt = None
    for x0 in starts:
        if not feasible(x0):
            # climb without the definiteness guard; keep the end point only
            # if it reached the region where the guarded objective is defined
            x0 = maximize(scaled_unguarded, x0, bounds, restarts=restarts, seed=seed).x
            if not feasible(x0):
                continue
        run = maximize(scaled, x0, bounds, restarts=restarts, seed=seed)
        if opt is not None:
            run.iterations += opt.iterations
        if opt is None or run.converged or (not opt.converged and run.value > opt.value):
            opt = run
        if opt.converged:
            break
    if opt is None:
        # no candidate start is feasible; let the optimizer report the failure
        opt = maximize(scaled, starts[0], bounds, restarts=0, seed=seed)
    theta = opt.x
    polished = 0
    if opt.converged:
        theta, polished = newton_polish(penalized, lambda t: eng.neg_hessian(t)[0], theta, bounds,
                                         steps=IRBM_POLISH_STEPS, tol=1e-9)
    pen = np.nan
    try:
        pen = eng.penalty(theta)[0]
    except INFEASIBLE_ERRORS:
        pass
    return finish_fit("iRBM", spec, eng, theta, opt.converged, opt.iterations, t0, threshold, penalty=pen,
                      info={"restarts": opt.restarts, "newton_steps": polished})
