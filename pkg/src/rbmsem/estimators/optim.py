"""Box-constrained maximization shared by the estimators."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from ..likelihood import NotPositiveDefiniteError, SingularInformationError
from ..model import SingularStructureError
from ..numdiff import NumericalDerivativeError
from .results import BoundsPolicy

# Objective value reported for points where the model cannot be evaluated.
# A finite value makes the line search back off; an infinite one can end the
# run with a spurious success flag.
INFEASIBLE = 1e10

INFEASIBLE_ERRORS = (
    NotPositiveDefiniteError,
    SingularStructureError,
    SingularInformationError,
    NumericalDerivativeError,
    np.linalg.LinAlgError,
    FloatingPointError,
)

GTOL = 1e-6
FTOL = 1e-13
MAXITER = 2000
JITTER = 0.1
# largest scaled projected gradient accepted at a reported optimum
PGTOL = 1e-4


@dataclass
class OptimOutcome:
    x: np.ndarray
    value: float
    converged: bool
    iterations: int
    message: str
    restarts: int = 0


def parameter_scale(x0, bounds: BoundsPolicy) -> np.ndarray:
    width = bounds.upper - bounds.lower
    return np.maximum(np.maximum(np.abs(x0), 0.01 * width), 1e-8)


def maximize(fun_grad, x0, bounds: BoundsPolicy, restarts: int = 3, seed: int = 0,
             gtol: float = GTOL, ftol: float = FTOL, maxiter: int = MAXITER) -> OptimOutcome:
    """Maximize ``f`` given ``fun_grad(x) -> (f, grad)`` inside a box.

    Parameters are rescaled to order one before handing them to L-BFGS-B.
    A run counts as converged only if L-BFGS-B reports success and the scaled
    projected gradient is small.  Failed runs are restarted from the best
    point so far, jittered after the first retry; the best run is returned.
    """
    x0 = bounds.clip(x0)
    scale = parameter_scale(x0, bounds)
    box = list(zip(bounds.lower / scale, bounds.upper / scale))

    def objective(z):
        try:
            f, g = fun_grad(z * scale)
        except INFEASIBLE_ERRORS:
            return INFEASIBLE, np.zeros_like(z)
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            return INFEASIBLE, np.zeros_like(z)
        return -float(f), -np.asarray(g, dtype=float) * scale

    rng = np.random.default_rng(seed)
    lo, hi = bounds.lower / scale, bounds.upper / scale
    best = None
    start = x0 / scale
    total_iter = 0
    for attempt in range(restarts + 1):
        with np.errstate(all="ignore"):
            res = minimize(objective, start, jac=True, method="L-BFGS-B", bounds=box,
                           options={"gtol": gtol, "ftol": ftol, "maxiter": maxiter})
        feasible = res.fun < 0.5 * INFEASIBLE
        total_iter += int(res.nit)
        pg = projected_gradient(res.x, res.jac, lo, hi)
        ok = bool(res.success and feasible and np.max(np.abs(pg), initial=0.0) <= PGTOL)
        out = OptimOutcome(bounds.clip(res.x * scale), -float(res.fun), ok, total_iter, str(res.message), attempt)
        if best is None or _better(out, best):
            best = out
        if out.converged:
            break
        # a stalled line search usually recovers from a fresh start at the
        # best point; repeated failures move on to jittered copies of it
        base = best.x if best.value > -0.5 * INFEASIBLE else x0
        if attempt >= 1:
            base = bounds.interior(base + JITTER * scale * rng.standard_normal(len(x0)))
        start = bounds.clip(base) / scale
    return best


def projected_gradient(z, g, lo, hi):
    """Gradient of a minimization objective with components blocked by the box removed."""
    g = np.array(g, dtype=float)
    g[(z <= lo) & (g > 0)] = 0.0
    g[(z >= hi) & (g < 0)] = 0.0
    return g


def _better(new: OptimOutcome, old: OptimOutcome) -> bool:
    if new.converged != old.converged:
        return new.converged
    return new.value > old.value
