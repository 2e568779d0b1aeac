"""Fit results, parameter bounds, start values and acceptability screening."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from ..likelihood import DataSummary
from ..model import ModelSpec, ParamVector, SingularStructureError, implied_moments, unpack
from ..presets import se_threshold

ESTIMATORS = ("ML", "eRBM", "iRBM", "Boot", "Jack", "REML")
REJECTION_REASONS = ("none", "no_convergence", "sigma_not_pd", "se_out_of_range")

VARIANCE_FACTOR = 2.0
LOADING_FACTOR = 10.0


@dataclass
class FitResult:
    """Outcome of one estimator on one dataset.

    ``se`` holds robust (sandwich) standard errors for ML and the RBM
    estimators, replicate standard deviations for the resampling
    corrections and inverse-Hessian standard errors for REML.  ``nu_hat``
    carries the sample means when intercepts were profiled out by centring.
    """

    estimator: str
    theta_hat: ParamVector
    se: np.ndarray
    loglik: float
    penalty: float = 0.0
    converged: bool = False
    acceptable: bool = False
    rejection_reason: str = "none"
    iterations: int = 0
    wall_time: float = 0.0
    nu_hat: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def values(self) -> np.ndarray:
        return self.theta_hat.values

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "theta_hat": self.theta_hat.as_dict(),
            "se": dict(zip(self.theta_hat.labels, _floats(self.se))),
            "loglik": _float(self.loglik),
            "penalty": _float(self.penalty),
            "converged": bool(self.converged),
            "acceptable": bool(self.acceptable),
            "rejection_reason": self.rejection_reason,
            "iterations": int(self.iterations),
            "wall_time": float(self.wall_time),
            "nu_hat": None if self.nu_hat is None else _floats(self.nu_hat),
            "info": self.info,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _float(x):
    x = float(x)
    return x if np.isfinite(x) else None


def _floats(xs):
    return [_float(x) for x in np.asarray(xs, dtype=float)]


@dataclass(frozen=True, eq=False)
class BoundsPolicy:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float)
        hi = np.array(self.upper, dtype=float)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("lower bounds must not exceed upper bounds")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("bounds must be finite")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def contains(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))

    def clip(self, theta) -> np.ndarray:
        return np.clip(np.asarray(theta, dtype=float), self.lower, self.upper)

    def interior(self, theta, frac=1e-3) -> np.ndarray:
        """Clip into the box, keeping a small margin from each face."""
        gap = frac * (self.upper - self.lower)
        return np.clip(np.asarray(theta, dtype=float), self.lower + gap, self.upper - gap)

    def as_list(self):
        return list(zip(self.lower.tolist(), self.upper.tolist()))


def _summary(data) -> DataSummary:
    return data if isinstance(data, DataSummary) else DataSummary.from_data(data)


def _markers(spec: ModelSpec):
    """Per latent variable, an indicator with a fixed non-zero loading.

    An indicator loading on no other factor is preferred.
    Returns ``(index, loading)`` or ``None``.
    """
    lam = spec.lambda_
    out = []
    for k in range(spec.q):
        cands = [i for i in range(spec.p) if lam.free[i, k] < 0 and lam.fixed[i, k] != 0]
        pure = [i for i in cands if all(lam.free[i, l] < 0 and lam.fixed[i, l] == 0 for l in range(spec.q) if l != k)]
        pick = (pure or cands or [None])[0]
        out.append(None if pick is None else (pick, lam.fixed[pick, k]))
    return out


def _latent_scale(spec, summ):
    """Observed-variance scale of each latent variable (marker variance over squared loading)."""
    s = np.diag(summ.s)
    scale = np.empty(spec.q)
    for k, mk in enumerate(_markers(spec)):
        scale[k] = s.max() if mk is None else s[mk[0]] / mk[1] ** 2
    return scale


def default_bounds(spec: ModelSpec, data) -> BoundsPolicy:
    """Data-informed box for every free parameter.

    Residual and latent variances lie in ``[0, 2 * variance scale]``, loadings
    and regressions within ``+-10`` times a ratio of indicator standard
    deviations, covariances inside the Cauchy-Schwarz box of their
    variances' upper bounds, and intercepts within ten standard deviations of
    the observed means.  A spec carrying explicit bounds overrides the rule.
    """
    if spec.lower is not None and spec.upper is not None:
        return BoundsPolicy(spec.lower, spec.upper)
    summ = _summary(data)
    var = np.diag(summ.s)
    if np.any(var <= 0):
        raise ValueError("an indicator has zero variance")
    sd = np.sqrt(var)
    markers = _markers(spec)
    msd = np.array([1.0 if mk is None else sd[mk[0]] / abs(mk[1]) for mk in markers])
    theta_ub = VARIANCE_FACTOR * var
    psi_ub = VARIANCE_FACTOR * _latent_scale(spec, summ)

    lower = np.empty(spec.m)
    upper = np.empty(spec.m)
    for a, cells in enumerate(spec.param_cells):
        name, i, j = cells[0]
        if name == "theta":
            hi = theta_ub[i] if i == j else np.sqrt(theta_ub[i] * theta_ub[j])
            lo = 0.0 if i == j else -hi
        elif name == "psi":
            hi = psi_ub[i] if i == j else np.sqrt(psi_ub[i] * psi_ub[j])
            lo = 0.0 if i == j else -hi
        elif name == "lambda":
            hi = LOADING_FACTOR * sd[i] / msd[j]
            lo = -hi
        elif name == "b":
            hi = LOADING_FACTOR * msd[i] / msd[j]
            lo = -hi
        elif name == "nu":
            lo, hi = summ.ybar[i] - LOADING_FACTOR * sd[i], summ.ybar[i] + LOADING_FACTOR * sd[i]
        else:  # alpha
            hi = np.abs(summ.ybar).max() + LOADING_FACTOR * sd.max()
            lo = -hi
        lower[a], upper[a] = lo, hi
    return BoundsPolicy(lower, upper)


def start_values(spec: ModelSpec, data, bounds: BoundsPolicy | None = None) -> np.ndarray:
    """Moment-based starting point: half the observed variance to residuals,
    loadings 1, regressions 0, latent (co)variances from marker indicators."""
    summ = _summary(data)
    s = summ.s
    var = np.diag(s)
    markers = _markers(spec)
    lat = np.array([0.5 * v for v in _latent_scale(spec, summ)])
    start = np.zeros(spec.m)
    for a, cells in enumerate(spec.param_cells):
        name, i, j = cells[0]
        if name == "theta":
            start[a] = 0.5 * np.mean([var[c[1]] for c in cells]) if i == j else 0.0
        elif name == "psi":
            if i == j:
                start[a] = lat[i]
            elif markers[i] is not None and markers[j] is not None and markers[i][0] != markers[j][0]:
                (mi, li), (mj, lj) = markers[i], markers[j]
                cov = s[mi, mj] / (li * lj)
                lim = 0.9 * np.sqrt(lat[i] * lat[j])
                start[a] = np.clip(cov, -lim, lim)
        elif name == "lambda":
            start[a] = 1.0
        elif name == "nu":
            start[a] = summ.ybar[i]
    start = _least_squares_variances(spec, s, start)
    alpha_idx = [a for a, c in enumerate(spec.param_cells) if c[0][0] == "alpha"]
    if alpha_idx:
        mats = unpack(start, spec)
        bt = np.linalg.inv(np.eye(spec.q) - mats.bmat)
        coef, *_ = np.linalg.lstsq(mats.lambda_ @ bt, summ.ybar - mats.nu, rcond=None)
        for a in alpha_idx:
            start[a] = coef[spec.param_cells[a][0][1]]
    if bounds is not None:
        start = bounds.interior(start)
    return start


def _least_squares_variances(spec, s, start):
    """Refit the variance parameters to ``S`` by least squares, others held at ``start``.

    Given loadings and regressions the implied covariance is linear in the
    entries of Theta and Psi.  The refit is kept only when it yields positive
    definite Theta and Psi.
    """
    idx = [a for a, c in enumerate(spec.param_cells) if c[0][0] in ("theta", "psi")]
    if not idx:
        return start
    mats = unpack(start, spec)
    try:
        lb = mats.lambda_ @ np.linalg.inv(np.eye(spec.q) - mats.bmat)
    except np.linalg.LinAlgError:
        return start
    rows, cols = np.tril_indices(spec.p)
    base = start.copy()
    base[idx] = 0.0
    m0 = unpack(base, spec)
    fixed_part = lb @ m0.psi @ lb.T + m0.theta
    design = []
    stacks = spec.derivative_stacks
    for a in idx:
        design.append((lb @ stacks["psi"][a] @ lb.T + stacks["theta"][a])[rows, cols])
    coef, *_ = np.linalg.lstsq(np.column_stack(design), (s - fixed_part)[rows, cols], rcond=None)
    trial = start.copy()
    trial[idx] = coef
    tm = unpack(trial, spec)
    for mat in (tm.theta, tm.psi):
        if mat.size and np.any(np.linalg.eigvalsh(mat) <= 1e-8 * max(1.0, np.abs(mat).max())):
            return start
    return trial


def sigma_is_pd(theta, spec: ModelSpec) -> bool:
    try:
        sigma = implied_moments(theta, spec).sigma
    except (SingularStructureError, ValueError):
        return False
    if not np.all(np.isfinite(sigma)):
        return False
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        return False
    return True


def check_acceptable(fit: FitResult, spec: ModelSpec, threshold: float | None = None) -> FitResult:
    """Screen a fit: converged, positive definite implied covariance, all SEs below ``threshold``.

    The threshold defaults to the model's value (5 for the two-factor model,
    500 for the growth curve model).
    """
    threshold = se_threshold(spec) if threshold is None else threshold
    se = np.asarray(fit.se, dtype=float)
    if not fit.converged:
        reason = "no_convergence"
    elif not sigma_is_pd(fit.theta_hat.values, spec):
        reason = "sigma_not_pd"
    elif se.shape != (spec.m,) or not np.all(np.isfinite(se)) or np.any(se >= threshold):
        reason = "se_out_of_range"
    else:
        reason = "none"
    return dataclasses.replace(fit, acceptable=reason == "none", rejection_reason=reason)
