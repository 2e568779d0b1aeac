"""Simulation of SEM data with normal or skewed, heavy-tailed drivers.

Latent disturbances and measurement errors are drawn separately.  Each has
its model covariance and a common marginal skewness and excess kurtosis,
obtained with the Fleishman cubic ``a + bZ + cZ^2 + dZ^3`` applied to
correlated normals.  The normal correlations are adjusted first (the
intermediate correlation of Vale and Maurelli) so that the transformed
variables hit the target correlations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import _check_theta, load_spec, unpack

FLEISHMAN_TOL = 1e-10
FLEISHMAN_MAXITER = 200
BISECTION_TOL = 1e-10


class InfeasibleDistributionError(ValueError):
    pass


@dataclass(frozen=True)
class DistributionSpec:
    """Target marginal skewness and excess kurtosis; ``(0, 0)`` is the normal case."""

    skewness: float = 0.0
    excess_kurtosis: float = 0.0

    def __post_init__(self):
        if self.excess_kurtosis < self.skewness**2 - 2:
            raise InfeasibleDistributionError(
                f"excess kurtosis {self.excess_kurtosis} is below skewness^2 - 2 = {self.skewness**2 - 2}"
            )

    @property
    def is_normal(self) -> bool:
        return self.skewness == 0 and self.excess_kurtosis == 0

    @property
    def label(self) -> str:
        if self.is_normal:
            return "normal"
        if (self.skewness, self.excess_kurtosis) == (-2.0, 6.0):
            return "nonnormal"
        return f"skew{self.skewness:g}_kurt{self.excess_kurtosis:g}"

    @classmethod
    def parse(cls, value) -> "DistributionSpec":
        """Accept a DistributionSpec, ``"normal"``, ``"nonnormal"``, ``"skew,kurt"`` or a pair."""
        if isinstance(value, DistributionSpec):
            return value
        if isinstance(value, str):
            key = value.strip().lower()
            if key in NAMED_DISTRIBUTIONS:
                return NAMED_DISTRIBUTIONS[key]
            try:
                skew, kurt = (float(v) for v in key.split(","))
            except ValueError:
                raise ValueError(f"cannot parse distribution {value!r}") from None
            return cls(skew, kurt)
        if isinstance(value, dict):
            return cls(float(value["skewness"]), float(value["excess_kurtosis"]))
        skew, kurt = value
        return cls(float(skew), float(kurt))


NORMAL = DistributionSpec(0.0, 0.0)
NONNORMAL = DistributionSpec(-2.0, 6.0)
NAMED_DISTRIBUTIONS = {"normal": NORMAL, "nonnormal": NONNORMAL}


def _fleishman_system(b, c, d, skew, kurt):
    f = np.array([
        b * b + 6 * b * d + 2 * c * c + 15 * d * d - 1,
        2 * c * (b * b + 24 * b * d + 105 * d * d + 2) - skew,
        24 * (b * d + c * c * (1 + b * b + 28 * b * d) + d * d * (12 + 48 * b * d + 141 * c * c + 225 * d * d)) - kurt,
    ])
    jac = np.array([
        [2 * b + 6 * d, 4 * c, 6 * b + 30 * d],
        [2 * c * (2 * b + 24 * d), 2 * (b * b + 24 * b * d + 105 * d * d + 2), 2 * c * (24 * b + 210 * d)],
        [24 * (d + c * c * (2 * b + 28 * d) + 48 * d**3),
         24 * (2 * c * (1 + b * b + 28 * b * d) + 282 * c * d * d),
         24 * (b + 28 * b * c * c + 2 * d * (12 + 48 * b * d + 141 * c * c + 225 * d * d) + d * d * (48 * b + 450 * d))],
    ])
    return f, jac


def fleishman_coeffs(dist) -> tuple[float, float, float, float]:
    """Coefficients ``(a, b, c, d)`` of the Fleishman cubic for a target skew and excess kurtosis.

    Damped Newton iterations start from the identity transform ``(1, 0, 0)``.

    Raises
    ------
    InfeasibleDistributionError
        If the moment system is not solved to 1e-10 within 200 iterations.
    """
    dist = DistributionSpec.parse(dist)
    skew, kurt = dist.skewness, dist.excess_kurtosis
    x = np.array([1.0, 0.0, 0.0])
    f, jac = _fleishman_system(*x, skew, kurt)
    norm = np.max(np.abs(f))
    for _ in range(FLEISHMAN_MAXITER):
        if norm < FLEISHMAN_TOL:
            break
        try:
            step = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            break
        lam = 1.0
        while lam > 1e-8:
            trial = x + lam * step
            f_new, jac_new = _fleishman_system(*trial, skew, kurt)
            new_norm = np.max(np.abs(f_new))
            if new_norm < norm:
                break
            lam *= 0.5
        else:
            break
        x, f, jac, norm = trial, f_new, jac_new, new_norm
    if norm >= FLEISHMAN_TOL:
        raise InfeasibleDistributionError(f"no Fleishman transform for skewness {skew}, excess kurtosis {kurt}")
    b, c, d = (float(v) for v in x)
    return 0.0 - c, b, c, d


def fleishman_correlation(r, coef1, coef2) -> float:
    """Correlation of two Fleishman variables whose normal drivers have correlation ``r``."""
    _, b1, c1, d1 = coef1
    _, b2, c2, d2 = coef2
    return r * (b1 * b2 + 3 * b1 * d2 + 3 * d1 * b2 + 9 * d1 * d2) + r**2 * (2 * c1 * c2) + r**3 * (6 * d1 * d2)


def intermediate_correlation(target, coef1, coef2=None) -> float:
    """Normal correlation that the Fleishman transforms map onto ``target`` (bisection)."""
    coef2 = coef1 if coef2 is None else coef2
    lo, hi = -1.0, 1.0
    f_lo = fleishman_correlation(lo, coef1, coef2) - target
    f_hi = fleishman_correlation(hi, coef1, coef2) - target
    if f_lo * f_hi > 0:
        raise InfeasibleDistributionError(f"correlation {target} is out of reach for this transform")
    while hi - lo > BISECTION_TOL:
        mid = 0.5 * (lo + hi)
        f_mid = fleishman_correlation(mid, coef1, coef2) - target
        if f_mid == 0:
            return mid
        if (f_mid < 0) == (f_lo < 0):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def draw_correlated(cov, n, dist, rng) -> np.ndarray:
    """``n`` draws with covariance ``cov`` and the marginal shape of ``dist``.

    Components with zero variance are returned as zeros.
    """
    dist = DistributionSpec.parse(dist)
    cov = np.asarray(cov, dtype=float)
    k = cov.shape[0]
    out = np.zeros((n, k))
    sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    live = np.nonzero(sd > 0)[0]
    if len(live) == 0:
        return out
    corr = cov[np.ix_(live, live)] / np.outer(sd[live], sd[live])
    if dist.is_normal:
        coef = (0.0, 1.0, 0.0, 0.0)
        inter = corr
    else:
        coef = fleishman_coeffs(dist)
        inter = np.eye(len(live))
        for i in range(len(live)):
            for j in range(i):
                inter[i, j] = inter[j, i] = intermediate_correlation(corr[i, j], coef)
    try:
        chol = np.linalg.cholesky(inter)
    except np.linalg.LinAlgError:
        raise InfeasibleDistributionError("intermediate correlation matrix is not positive definite") from None
    z = rng.standard_normal((n, len(live))) @ chol.T
    if not dist.is_normal:
        a, b, c, d = coef
        z = a + z * (b + z * (c + z * d))
    out[:, live] = z * sd[live]
    return out


def simulate(spec, theta, n: int, dist=NORMAL, seed=None) -> np.ndarray:
    """Draw an ``n x p`` dataset from the model at parameter vector ``theta``.

    Latent disturbances ``zeta`` (covariance Psi) and errors ``eps``
    (covariance Theta) are drawn independently with the marginal shape of
    ``dist``; then ``eta = (I - B)^-1 (alpha + zeta)`` and
    ``y = nu + Lambda eta + eps``.  The same seed gives an identical array.
    """
    spec = load_spec(spec)
    theta = _check_theta(np.asarray(theta, dtype=float), spec)
    if n < 1:
        raise ValueError("n must be positive")
    mats = unpack(theta, spec)
    rng = np.random.default_rng(seed)
    zeta = draw_correlated(mats.psi, n, dist, rng)
    eps = draw_correlated(mats.theta, n, dist, rng)
    bt = np.linalg.inv(np.eye(spec.q) - mats.bmat)
    eta = (mats.alpha + zeta) @ bt.T
    return mats.nu + eta @ mats.lambda_.T + eps


def sample_moments(x) -> tuple[np.ndarray, np.ndarray]:
    """Sample skewness and excess kurtosis of each column (moment estimators)."""
    x = np.asarray(x, dtype=float)
    dev = x - x.mean(axis=0)
    m2 = np.mean(dev**2, axis=0)
    skew = np.mean(dev**3, axis=0) / m2**1.5
    kurt = np.mean(dev**4, axis=0) / m2**2 - 3.0
    return skew, kurt

