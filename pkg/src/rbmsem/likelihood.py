"""Normal-theory log-likelihood of an SEM, its scores and information matrices.

The heavy lifting is done by :class:`LikelihoodEngine`, which evaluates the
log-likelihood, total scores and per-observation scores for a whole batch of
parameter vectors at once.  Finite-difference Hessians and the bias-reducing
penalty are built from those batched calls.

Scores use the matrix chain rule.  With ``l_mu = Sigma^-1 (ybar - mu)`` and
``L = Sigma^-1 W Sigma^-1 - Sigma^-1``, where ``W = S + (ybar - mu)(ybar - mu)'``
(just ``S`` without a mean structure), the gradients of the log-likelihood
with respect to the unconstrained model matrices are::

    nu:     n l_mu
    alpha:  n (Lambda Bt)' l_mu
    Lambda: n (l_mu kappa' + L Lambda Psit)
    B:      (Lambda Bt)' G_Lambda
    Theta:  n/2 L
    Psi:    n/2 (Lambda Bt)' L (Lambda Bt)

and the score of a parameter sums these over the cells it occupies.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import numdiff
from .model import MATRIX_NAMES, ModelSpec, _check_theta, structure_batch

LOG2PI = np.log(2.0 * np.pi)


class NotPositiveDefiniteError(ArithmeticError):
    """The implied covariance matrix is not positive definite."""


class SingularInformationError(ArithmeticError):
    """The negative Hessian is singular."""


class PenaltyError(SingularInformationError):
    """The penalty is undefined because the negative Hessian is singular."""


@dataclass(frozen=True, eq=False)
class DataSummary:
    """Sample size, mean and covariance (divisor n) of an n x p data matrix."""

    n: int
    ybar: np.ndarray
    s: np.ndarray

    @classmethod
    def from_data(cls, y) -> "DataSummary":
        y = as_dataset(y)
        n = y.shape[0]
        ybar = y.mean(axis=0)
        r = y - ybar
        s = r.T @ r / n
        return cls(n=n, ybar=ybar, s=0.5 * (s + s.T))


class ScoreBlocks(NamedTuple):
    l_mu: np.ndarray
    l_sigma: np.ndarray


class InfoMatrices(NamedTuple):
    j: np.ndarray
    e: np.ndarray
    sandwich: np.ndarray


def as_dataset(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or y.shape[0] < 1:
        raise ValueError("data must be an n x p array")
    if not np.all(np.isfinite(y)):
        raise ValueError("data contain non-finite values")
    return y


class LikelihoodEngine:
    """Batched likelihood computations for one model and one dataset.

    ``data`` is either an ``n x p`` array or a :class:`DataSummary`; the
    per-observation quantities need the array.
    """

    # rows per chunk of (batch x observations) in per-observation scores
    chunk_rows = 200_000

    def __init__(self, spec: ModelSpec, data):
        self.spec = spec
        if isinstance(data, DataSummary):
            self.y = None
            self.summary = data
        else:
            self.y = as_dataset(data)
            self.summary = DataSummary.from_data(self.y)
        if self.summary.ybar.shape != (spec.p,):
            raise ValueError(f"data have {self.summary.ybar.shape[0]} columns, model expects {spec.p}")
        self.n = self.summary.n
        self._cells = {}
        for name in MATRIX_NAMES:
            free = spec.pattern(name).free
            rows, cols = np.nonzero(free >= 0)
            if len(rows):
                inc = np.zeros((len(rows), spec.m))
                inc[np.arange(len(rows)), free[rows, cols]] = 1.0
                self._cells[name] = (rows, cols, inc)

    # -- shared pieces -----------------------------------------------------
    def _prepare(self, thetas):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        st = structure_batch(thetas, self.spec)
        try:
            chol = np.linalg.cholesky(st["sigma"])
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError("implied covariance is not positive definite") from None
        logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
        eye = np.broadcast_to(np.eye(self.spec.p), st["sigma"].shape)
        linv = np.linalg.solve(chol, eye)
        st["sinv"] = np.swapaxes(linv, -1, -2) @ linv
        st["logdet"] = logdet
        return st

    def _resid_mean(self, st):
        if self.spec.mean_structure:
            return self.summary.ybar - st["mu"]
        return np.zeros_like(st["mu"])

    def _contract(self, name, values):
        """Sum cell values ``(..., ncells)`` into parameter slots ``(..., m)``."""
        return values @ self._cells[name][2]

    # -- totals -------------------------------------------------------------
    def loglik(self, thetas):
        st = self._prepare(thetas)
        n, p = self.n, self.spec.p
        d = self._resid_mean(st)
        sinv = st["sinv"]
        tr = np.einsum("kij,ji->k", sinv, self.summary.s)
        quad = np.einsum("ki,kij,kj->k", d, sinv, d)
        return -0.5 * n * (p * LOG2PI + st["logdet"] + tr + quad)

    def blocks(self, thetas, st=None):
        st = self._prepare(thetas) if st is None else st
        sinv = st["sinv"]
        d = self._resid_mean(st)
        l_mu = np.einsum("kij,kj->ki", sinv, d)
        w = self.summary.s + d[:, :, None] * d[:, None, :]
        l_sigma = sinv @ w @ sinv - sinv
        return l_mu, 0.5 * (l_sigma + np.swapaxes(l_sigma, -1, -2))

    def score(self, thetas):
        st = self._prepare(thetas)
        l_mu, lsig = self.blocks(thetas, st)
        n = self.n
        lam, lb, psit, kappa = st["lambda"], st["lb"], st["psit"], st["kappa"]
        lbt = np.swapaxes(lb, -1, -2)
        grads = {}
        if "nu" in self._cells:
            grads["nu"] = n * l_mu[:, :, None]
        if "alpha" in self._cells:
            grads["alpha"] = n * (lbt @ l_mu[:, :, None])
        if "lambda" in self._cells or "b" in self._cells:
            g_lam = n * (l_mu[:, :, None] * np.swapaxes(kappa, -1, -2) + lsig @ lam @ psit)
            grads["lambda"] = g_lam
            grads["b"] = lbt @ g_lam
        grads["theta"] = 0.5 * n * lsig
        grads["psi"] = 0.5 * n * (lbt @ lsig @ lb)
        out = np.zeros((lam.shape[0], self.spec.m))
        for name, (rows, cols, inc) in self._cells.items():
            out += grads[name][:, rows, cols] @ inc
        return out

    # -- per observation ----------------------------------------------------
    def _require_y(self):
        if self.y is None:
            raise ValueError("per-observation quantities need the raw data matrix")
        return self.y

    def _residuals(self, st):
        y = self._require_y()
        if self.spec.mean_structure:
            return y[None, :, :] - st["mu"][:, None, :]
        return np.broadcast_to(y - self.summary.ybar, (st["mu"].shape[0],) + y.shape)

    def contributions(self, thetas):
        st = self._prepare(thetas)
        r = self._residuals(st)
        u = r @ st["sinv"]
        quad = np.einsum("kni,kni->kn", u, r)
        return -0.5 * (self.spec.p * LOG2PI + st["logdet"][:, None] + quad)

    def obs_scores(self, thetas):
        """Analytic per-observation scores, shape ``(K, n, m)``."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        y = self._require_y()
        step = max(1, self.chunk_rows // y.shape[0])
        return np.concatenate(
            [self._obs_scores(thetas[i:i + step]) for i in range(0, len(thetas), step)]
        )

    def _obs_scores(self, thetas):
        st = self._prepare(thetas)
        r = self._residuals(st)
        sinv, lam, lb, psit = st["sinv"], st["lambda"], st["lb"], st["psit"]
        kappa = st["kappa"][:, None, :, 0]
        lbt = np.swapaxes(lb, -1, -2)
        u = r @ sinv
        w = u @ lb
        out = np.zeros(u.shape[:2] + (self.spec.m,))
        cells = self._cells
        if "nu" in cells:
            rows, _, _ = cells["nu"]
            out += self._contract("nu", u[:, :, rows])
        if "alpha" in cells:
            rows, _, _ = cells["alpha"]
            out += self._contract("alpha", w[:, :, rows])
        if "lambda" in cells or "b" in cells:
            lp = lam @ psit
            slp = sinv @ lp
            kv = kappa + u @ lp
            if "lambda" in cells:
                rows, cols, _ = cells["lambda"]
                vals = u[:, :, rows] * kv[:, :, cols] - slp[:, None, rows, cols]
                out += self._contract("lambda", vals)
            if "b" in cells:
                rows, cols, _ = cells["b"]
                lslp = lbt @ slp
                vals = w[:, :, rows] * kv[:, :, cols] - lslp[:, None, rows, cols]
                out += self._contract("b", vals)
        if "theta" in cells:
            rows, cols, _ = cells["theta"]
            vals = 0.5 * (u[:, :, rows] * u[:, :, cols] - sinv[:, None, rows, cols])
            out += self._contract("theta", vals)
        if "psi" in cells:
            rows, cols, _ = cells["psi"]
            lsl = lbt @ sinv @ lb
            vals = 0.5 * (w[:, :, rows] * w[:, :, cols] - lsl[:, None, rows, cols])
            out += self._contract("psi", vals)
        return out

    # -- information matrices and penalty ------------------------------------
    def neg_hessian(self, thetas, symmetrize=True):
        """``j`` by central differences of the analytic score, shape ``(K, m, m)``."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        k, m = thetas.shape
        h = numdiff.step_sizes(thetas, numdiff.HESS_POWER)
        shift = h[:, :, None] * np.eye(m)
        pts = np.concatenate([thetas[:, None, :] + shift, thetas[:, None, :] - shift], axis=1)
        g = self.score(pts.reshape(-1, m)).reshape(k, 2, m, m)
        hess = (g[:, 0] - g[:, 1]) / (2.0 * h[:, :, None])
        if not np.all(np.isfinite(hess)):
            raise numdiff.NumericalDerivativeError("non-finite Hessian entries")
        j = -hess
        if symmetrize:
            j = 0.5 * (j + np.swapaxes(j, -1, -2))
        return j

    def outer_scores(self, thetas):
        s = self.obs_scores(thetas)
        e = np.einsum("kna,knb->kab", s, s)
        return 0.5 * (e + np.swapaxes(e, -1, -2))

    def penalty(self, thetas, return_parts=False):
        """``P = -tr(j^-1 e) / 2`` for each row of ``thetas``."""
        j = self.neg_hessian(thetas)
        e = self.outer_scores(thetas)
        _check_invertible(j)
        pen = -0.5 * np.trace(np.linalg.solve(j, e), axis1=-2, axis2=-1)
        if return_parts:
            return pen, j, e
        return pen

    def penalty_and_gradient(self, theta, require_pd=False):
        """Penalty at ``theta`` and its central-difference gradient, in one batch.

        With ``require_pd`` a negative Hessian at ``theta`` that is not
        positive definite raises :class:`PenaltyError`.
        """
        theta = np.asarray(theta, dtype=float)
        m = len(theta)
        h = numdiff.step_sizes(theta)
        pts = np.vstack([theta[None, :], numdiff.central_points(theta, h)])
        pen, j, _ = self.penalty(pts, return_parts=True)
        if require_pd and np.linalg.eigvalsh(j[0])[0] <= 0:
            raise PenaltyError("negative Hessian is not positive definite")
        grad = (pen[1:m + 1] - pen[m + 1:]) / (2.0 * h)
        return pen[0], grad


def _check_invertible(j):
    eig = np.linalg.eigvalsh(j)
    scale = np.max(np.abs(eig), axis=-1)
    if np.any(~np.isfinite(eig)) or np.any(np.min(np.abs(eig), axis=-1) <= 1e-13 * scale):
        raise PenaltyError("negative Hessian is singular")


# -- public single-point functions ---------------------------------------------

def _engine(spec, data):
    if isinstance(data, LikelihoodEngine):
        return data
    return LikelihoodEngine(spec, data)


def loglik(theta, spec: ModelSpec, data) -> float:
    """Log-likelihood; the quadratic mean term is dropped without a mean structure."""
    theta = _check_theta(theta, spec)
    return float(_engine(spec, data).loglik(theta)[0])


def loglik_contributions(theta, spec: ModelSpec, y) -> np.ndarray:
    theta = _check_theta(theta, spec)
    return _engine(spec, y).contributions(theta)[0]


def score_blocks(theta, spec: ModelSpec, data) -> ScoreBlocks:
    theta = _check_theta(theta, spec)
    l_mu, l_sigma = _engine(spec, data).blocks(theta)
    return ScoreBlocks(l_mu[0], l_sigma[0])


def score_general(theta, spec: ModelSpec, data) -> np.ndarray:
    """Analytic gradient of the log-likelihood for any spec."""
    theta = _check_theta(theta, spec)
    return _engine(spec, data).score(theta)[0]


def score_numeric(theta, spec: ModelSpec, data) -> np.ndarray:
    """Gradient of the log-likelihood by central differences."""
    theta = _check_theta(theta, spec)
    eng = _engine(spec, data)
    return numdiff.gradient(eng.loglik, theta, vectorized=True)


def obs_scores(theta, spec: ModelSpec, y, method="analytic") -> np.ndarray:
    """Per-observation gradients ``d l_i / d theta`` as an ``n x m`` array."""
    theta = _check_theta(theta, spec)
    eng = _engine(spec, y)
    if method == "analytic":
        return eng.obs_scores(theta)[0]
    if method == "numeric":
        return numdiff.jacobian(lambda t: eng.contributions(t), theta, vectorized=True)
    raise ValueError(f"unknown method {method!r}")


def _two_factor_parts(theta):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (13,):
        raise ValueError("two-factor scores take the 13 covariance parameters")
    lam = np.zeros((6, 2))
    lam[0, 0] = lam[3, 1] = 1.0
    lam[1, 0], lam[2, 0], lam[4, 1], lam[5, 1] = theta[:4]
    beta = theta[4]
    bt = np.array([[1.0, 0.0], [beta, 1.0]])
    psi = np.diag(theta[11:13])
    return lam, bt, np.diag(theta[5:11]), psi


def score_two_factor(theta, data) -> np.ndarray:
    """Closed-form score of the centred two-factor model (13 parameters)."""
    summ = data if isinstance(data, DataSummary) else DataSummary.from_data(data)
    lam, bt, th, psi = _two_factor_parts(theta)
    psit = bt @ psi @ bt.T
    sigma = lam @ psit @ lam.T + th
    sinv = np.linalg.inv(sigma)
    lsig = sinv @ summ.s @ sinv - sinv
    n = summ.n
    g_lam = n * (lsig @ lam @ psit)
    # beta sits in cell (2, 1) of B
    g_beta = n * (bt.T @ lam.T @ lsig @ lam @ psit)[1, 0]
    g_theta = 0.5 * n * np.diag(lsig)
    g_psi = 0.5 * n * np.diag(bt.T @ lam.T @ lsig @ lam @ bt)
    return np.concatenate([[g_lam[1, 0], g_lam[2, 0], g_lam[4, 1], g_lam[5, 1], g_beta], g_theta, g_psi])


def score_gcm(theta, data, n_occasions=None) -> np.ndarray:
    """Closed-form score of the growth curve model
    (``alpha1, alpha2, psi11, psi22, psi12, theta11``)."""
    summ = data if isinstance(data, DataSummary) else DataSummary.from_data(data)
    theta = np.asarray(theta, dtype=float)
    p = summ.ybar.shape[0] if n_occasions is None else n_occasions
    lam = np.column_stack([np.ones(p), np.arange(p, dtype=float)])
    alpha = theta[:2]
    psi = np.array([[theta[2], theta[4]], [theta[4], theta[3]]])
    sigma = lam @ psi @ lam.T + theta[5] * np.eye(p)
    sinv = np.linalg.inv(sigma)
    d = summ.ybar - lam @ alpha
    w = summ.s + np.outer(d, d)
    lsig = sinv @ w @ sinv - sinv
    n = summ.n
    g_alpha = n * lam.T @ sinv @ d
    m = 0.5 * n * lam.T @ lsig @ lam
    return np.array([g_alpha[0], g_alpha[1], m[0, 0], m[1, 1], m[0, 1] + m[1, 0], 0.5 * n * np.trace(lsig)])


def info_j(theta, spec: ModelSpec, data, method="score", symmetrize=True) -> np.ndarray:
    """Negative Hessian of the log-likelihood by central differences.

    ``method="score"`` differentiates the analytic score once; ``"loglik"``
    takes second differences of the log-likelihood.
    """
    theta = _check_theta(theta, spec)
    eng = _engine(spec, data)
    if method == "score":
        return eng.neg_hessian(theta, symmetrize=symmetrize)[0]
    if method == "loglik":
        j = -numdiff.hessian(lambda t: float(eng.loglik(t)[0]), theta)
        return 0.5 * (j + j.T) if symmetrize else j
    raise ValueError(f"unknown method {method!r}")


def info_e(theta, spec: ModelSpec, y, method="analytic") -> np.ndarray:
    """Sum over observations of outer products of per-observation scores."""
    s = obs_scores(theta, spec, y, method=method)
    if not np.all(np.isfinite(s)):
        raise numdiff.NumericalDerivativeError("non-finite per-observation scores")
    e = s.T @ s
    return 0.5 * (e + e.T)


def sandwich(j, e) -> np.ndarray:
    """``j^-1 e j^-1`` through linear solves."""
    try:
        left = np.linalg.solve(j, e)
        out = np.linalg.solve(j, left.T)
    except np.linalg.LinAlgError:
        raise SingularInformationError("negative Hessian is singular") from None
    return 0.5 * (out + out.T)


def info_matrices(theta, spec: ModelSpec, y) -> InfoMatrices:
    theta = _check_theta(theta, spec)
    eng = _engine(spec, y)
    j = eng.neg_hessian(theta)[0]
    e = eng.outer_scores(theta)[0]
    return InfoMatrices(j, e, sandwich(j, e))


def sandwich_se(theta, spec: ModelSpec, y) -> np.ndarray:
    """Robust standard errors: square roots of the diagonal of ``j^-1 e j^-1``."""
    cov = info_matrices(theta, spec, y).sandwich
    diag = np.diag(cov)
    if np.any(diag < 0) or not np.all(np.isfinite(diag)):
        raise numdiff.NumericalDerivativeError("sandwich covariance has an invalid diagonal")
    return np.sqrt(diag)
