"""Maximum likelihood estimation."""
from __future__ import annotations

import time

import numpy as np

from ..likelihood import LikelihoodEngine, sandwich
from ..model import ModelSpec, load_spec, unpack
from .optim import INFEASIBLE_ERRORS, JITTER, maximize, parameter_scale
from .results import BoundsPolicy, FitResult, check_acceptable, default_bounds, start_values

POLISH_STEPS = 10


def fit_ml(spec, data, *, bounds: BoundsPolicy | None = None, start=None, restarts: int = 3,
           seed: int = 0, threshold: float | None = None, engine: LikelihoodEngine | None = None) -> FitResult:
    """Maximum likelihood fit under box constraints.

    The quasi-Newton run is followed by a few Newton steps on the free
    (non-bound) parameters, which pins the optimum down to rounding error.

    Parameters
    ----------
    spec : ModelSpec or preset name
    data : ndarray (n, p)
        Raw observations.  Models without a mean structure are fitted to the
        centred data and report the sample means in ``nu_hat``.
    bounds : BoundsPolicy, optional
        Defaults to :func:`default_bounds`.
    start : array_like, optional
        Defaults to :func:`start_values`.
    restarts : int
        Jittered restarts tried when the optimizer fails.
    threshold : float, optional
        SE threshold for the acceptability screen.

    Returns
    -------
    FitResult
    """
    t0 = time.perf_counter()
    spec = load_spec(spec)
    eng = engine if engine is not None else LikelihoodEngine(spec, data)
    bounds = default_bounds(spec, eng.summary) if bounds is None else bounds
    x0 = start_values(spec, eng.summary, bounds) if start is None else bounds.clip(start)
    x0 = feasible_start(eng, x0, bounds, restarts, seed)
    n = eng.n

    def fun_grad(theta):
        return eng.loglik(theta)[0] / n, eng.score(theta)[0] / n

    opt = maximize(fun_grad, x0, bounds, restarts=restarts, seed=seed)
    theta = opt.x
    polished = 0
    if opt.converged:
        theta, polished = newton_polish(
            lambda t: (eng.loglik(t)[0], eng.score(t)[0]), lambda t: eng.neg_hessian(t)[0], theta, bounds)
    fit = finish_fit("ML", spec, eng, theta, opt.converged, opt.iterations, t0, threshold,
                     info={"restarts": opt.restarts, "newton_steps": polished})
    return fit


class StartValueError(ValueError):
    pass


def feasible_start(eng: LikelihoodEngine, x0, bounds: BoundsPolicy, tries: int, seed: int) -> np.ndarray:
    """``x0`` if the implied covariance is positive definite there, else a jittered copy that is."""
    rng = np.random.default_rng(seed)
    scale = parameter_scale(x0, bounds)
    cand = x0
    for _ in range(tries + 1):
        try:
            if np.isfinite(eng.loglik(cand)[0]):
                return cand
        except INFEASIBLE_ERRORS:
            pass
        cand = bounds.interior(x0 + JITTER * scale * rng.standard_normal(len(x0)))
    raise StartValueError("implied covariance is not positive definite at any start value")


def newton_polish(fun_grad, curvature, theta, bounds: BoundsPolicy, steps: int = POLISH_STEPS, tol: float = 1e-12):
    """Newton-type iterations on the parameters not held at a bound.

    ``fun_grad(theta) -> (f, grad)`` is the objective being maximized and
    ``curvature(theta)`` a positive definite approximation to its negative
    Hessian.  A step is kept only if it stays inside the box and does not
    lower the objective beyond rounding.
    """
    theta = np.array(theta, dtype=float)
    try:
        f, g = fun_grad(theta)
    except INFEASIBLE_ERRORS:
        return theta, 0
    width = bounds.upper - bounds.lower
    taken = 0
    for _ in range(steps):
        at_lo = (theta - bounds.lower <= 1e-9 * width) & (g < 0)
        at_hi = (bounds.upper - theta <= 1e-9 * width) & (g > 0)
        free = ~(at_lo | at_hi)
        if not free.any():
            break
        try:
            jf = curvature(theta)[np.ix_(free, free)]
            np.linalg.cholesky(jf)
            step = np.linalg.solve(jf, g[free])
        except INFEASIBLE_ERRORS:
            break
        new = theta.copy()
        new[free] += step
        if not bounds.contains(new):
            break
        try:
            f_new, g_new = fun_grad(new)
        except INFEASIBLE_ERRORS:
            break
        if not np.isfinite(f_new) or f_new < f - 1e-10 * max(1.0, abs(f)):
            break
        theta, f, g = new, f_new, g_new
        taken += 1
        if np.all(np.abs(step) <= tol * np.maximum(1.0, np.abs(theta[free]))):
            break
    return theta, taken


def robust_se(eng: LikelihoodEngine, theta) -> np.ndarray:
    """Sandwich standard errors, NaN when they cannot be computed."""
    m = len(theta)
    if eng.y is None:
        return np.full(m, np.nan)
    try:
        j = eng.neg_hessian(theta)[0]
        e = eng.outer_scores(theta)[0]
        cov = sandwich(j, e)
    except INFEASIBLE_ERRORS:
        return np.full(m, np.nan)
    diag = np.diag(cov)
    with np.errstate(invalid="ignore"):
        return np.where(diag >= 0, np.sqrt(np.abs(diag)), np.nan)


def fitted_nu(spec: ModelSpec, eng: LikelihoodEngine, theta) -> np.ndarray:
    if spec.mean_structure:
        return unpack(theta, spec).nu
    return eng.summary.ybar.copy()


def finish_fit(name, spec, eng, theta, converged, iterations, t0, threshold, penalty=0.0, info=None) -> FitResult:
    """Attach log-likelihood, robust SEs and the acceptability verdict."""
    try:
        ll = float(eng.loglik(theta)[0])
    except INFEASIBLE_ERRORS:
        ll = float("nan")
    fit = FitResult(
        estimator=name,
        theta_hat=spec.param_vector(theta),
        se=robust_se(eng, theta),
        loglik=ll,
        penalty=float(penalty),
        converged=bool(converged),
        iterations=int(iterations),
        nu_hat=fitted_nu(spec, eng, theta),
        info=dict(info or {}),
    )
    fit = check_acceptable(fit, spec, threshold)
    fit.wall_time = time.perf_counter() - t0
    return fit
