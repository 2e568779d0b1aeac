"""Restricted maximum likelihood for linear growth curve models.

A growth curve model is a linear mixed model: every subject has design
``X_i = Z_i = Lambda`` (fixed loadings), fixed effects ``alpha``, random
effects with covariance ``Psi`` and residual covariance ``Theta``.  With a
balanced design the marginal covariance is block diagonal with blocks
``Sigma = Lambda Psi Lambda' + Theta``, so every term of the restricted
likelihood reduces to ``p x p`` and ``q x q`` algebra on the sample moments.
"""
from __future__ import annotations

import time

import numpy as np

from .. import numdiff
from ..likelihood import DataSummary, LikelihoodEngine, NotPositiveDefiniteError, as_dataset
from ..model import ModelSpec, SpecError, load_spec, structure_batch
from ..presets import gcm
from .ml import newton_polish
from .optim import INFEASIBLE_ERRORS, maximize
from .results import BoundsPolicy, FitResult, check_acceptable, default_bounds, start_values


def _check_growth_spec(spec: ModelSpec):
    fixed_free = [spec.lambda_.free, spec.bmat.free, spec.nu.free]
    if any(np.any(f >= 0) for f in fixed_free) or np.any(spec.bmat.fixed != 0):
        raise SpecError("REML needs fixed loadings, no latent regressions and no free intercepts")
    if not spec.mean_structure or np.any(spec.alpha.free < 0):
        raise SpecError("REML needs every latent mean free")
    if np.linalg.matrix_rank(spec.lambda_.fixed) < spec.q:
        raise SpecError("loading matrix is rank deficient")


class RemlObjective:
    """Restricted log-likelihood over the (co)variance parameters of a growth model.

    ``value(phi) = -1/2 [n log|Sigma| + log|n Lambda' Sigma^-1 Lambda|
    + sum_i r_i' Sigma^-1 r_i]`` with residuals ``r_i`` around the GLS
    fit of the latent means.
    """

    def __init__(self, spec: ModelSpec, data):
        _check_growth_spec(spec)
        self.spec = spec
        self.summary = data if isinstance(data, DataSummary) else DataSummary.from_data(as_dataset(data))
        if self.summary.n < 2:
            raise ValueError("REML needs at least two subjects")
        self.lam = spec.lambda_.fixed
        cells = spec.param_cells
        self.alpha_idx = np.array([a for a in range(spec.m) if cells[a][0][0] == "alpha"])
        self.var_idx = np.array([a for a in range(spec.m) if cells[a][0][0] != "alpha"])
        stacks = spec.derivative_stacks
        lam = self.lam
        # d Sigma / d phi_a for each variance parameter
        self.dsigma = np.array([lam @ stacks["psi"][a] @ lam.T + stacks["theta"][a] for a in self.var_idx])

    def full_theta(self, phi, alpha=None):
        theta = np.zeros(self.spec.m)
        theta[self.var_idx] = phi
        if alpha is not None:
            for a in self.alpha_idx:
                theta[a] = alpha[self.spec.param_cells[a][0][1]]
        return theta

    def _parts(self, phi):
        st = structure_batch(self.full_theta(phi)[None, :], self.spec)
        sigma = st["sigma"][0]
        try:
            chol = np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError("marginal covariance is not positive definite") from None
        sinv = np.linalg.inv(chol)
        sinv = sinv.T @ sinv
        lam = self.lam
        info = lam.T @ sinv @ lam
        try:
            ichol = np.linalg.cholesky(info)
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError("fixed-effects information is singular") from None
        alpha = np.linalg.solve(info, lam.T @ sinv @ self.summary.ybar)
        d = self.summary.ybar - lam @ alpha
        return sigma, chol, sinv, info, ichol, alpha, d

    def alpha_hat(self, phi):
        return self._parts(phi)[5]

    def value(self, phi) -> float:
        _, chol, sinv, _, ichol, _, d = self._parts(phi)
        n, q = self.summary.n, self.spec.q
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        logdet_x = q * np.log(n) + 2.0 * np.sum(np.log(np.diag(ichol)))
        quad = n * (np.sum(sinv * self.summary.s) + d @ sinv @ d)
        return -0.5 * (n * logdet + logdet_x + quad)

    def gradient(self, phi) -> np.ndarray:
        _, _, sinv, info, _, _, d = self._parts(phi)
        n = self.summary.n
        w = self.summary.s + np.outer(d, d)
        proj = sinv @ self.lam @ np.linalg.solve(info, self.lam.T @ sinv)
        g = 0.5 * n * (sinv @ w @ sinv - sinv) + 0.5 * proj
        return np.einsum("aij,ij->a", self.dsigma, g)

    def value_and_gradient(self, phi):
        return self.value(phi), self.gradient(phi)

    def neg_hessian(self, phi) -> np.ndarray:
        h = numdiff.step_sizes(phi, numdiff.HESS_POWER)
        jac = numdiff.jacobian(self.gradient, phi, h=h)
        return -0.5 * (jac + jac.T)


def reml_loglik(theta, spec: ModelSpec, data) -> float:
    """Restricted log-likelihood at the (co)variance parameters contained in ``theta``."""
    obj = RemlObjective(load_spec(spec), data)
    return obj.value(np.asarray(theta, dtype=float)[obj.var_idx])


def fit_reml_gcm(data, spec=None, *, bounds: BoundsPolicy | None = None, start=None,
                 restarts: int = 3, seed: int = 0, threshold: float | None = None) -> FitResult:
    """REML fit of a linear growth curve model (the ``gcm`` preset by default).

    Latent means are the GLS estimates at the REML (co)variances.  Standard
    errors of the (co)variances come from the inverse observed Hessian of the
    restricted log-likelihood, those of the means from ``(X' V^-1 X)^-1``.
    ``loglik`` is the ordinary log-likelihood at the estimate and
    ``info["reml_loglik"]`` the restricted one.

    Raises
    ------
    SpecError
        For models that are not growth curve models.
    ValueError
        For fewer than two subjects.
    """
    t0 = time.perf_counter()
    spec = gcm() if spec is None else load_spec(spec)
    y = as_dataset(data)
    obj = RemlObjective(spec, y)
    vi = obj.var_idx
    full_bounds = default_bounds(spec, obj.summary) if bounds is None else bounds
    box = BoundsPolicy(full_bounds.lower[vi], full_bounds.upper[vi])
    x0 = start_values(spec, obj.summary, full_bounds)[vi] if start is None else np.asarray(start, float)[vi]
    n = obj.summary.n

    def scaled(phi):
        f, g = obj.value_and_gradient(phi)
        return f / n, g / n

    opt = maximize(scaled, box.clip(x0), box, restarts=restarts, seed=seed)
    phi = opt.x
    steps = 0
    if opt.converged:
        phi, steps = newton_polish(obj.value_and_gradient, obj.neg_hessian, phi, box)

    se = np.full(spec.m, np.nan)
    alpha = np.zeros(len(obj.alpha_idx))
    try:
        _, _, _, info, _, alpha, _ = obj._parts(phi)
        se[obj.alpha_idx] = np.sqrt(np.diag(np.linalg.inv(n * info)))
        cov = np.linalg.inv(obj.neg_hessian(phi))
        diag = np.diag(cov)
        se[vi] = np.where(diag > 0, np.sqrt(np.abs(diag)), np.nan)
        reml_value = obj.value(phi)
    except INFEASIBLE_ERRORS:
        reml_value = float("nan")
    theta = obj.full_theta(phi, alpha)
    try:
        ll = float(LikelihoodEngine(spec, obj.summary).loglik(theta)[0])
    except INFEASIBLE_ERRORS:
        ll = float("nan")
    fit = FitResult("REML", spec.param_vector(theta), se, ll, converged=opt.converged,
                    iterations=opt.iterations, nu_hat=spec.nu.fixed[:, 0].copy(),
                    info={"reml_loglik": float(reml_value), "newton_steps": steps, "restarts": opt.restarts})
    fit = check_acceptable(fit, spec, threshold)
    fit.wall_time = time.perf_counter() - t0
    return fit
