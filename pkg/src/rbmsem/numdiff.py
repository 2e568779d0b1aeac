"""Central finite differences.

Step sizes follow the usual rule ``h_a = eps**power * max(1, |x_a|)`` with
``power = 1/3`` for first derivatives and ``1/4`` for second derivatives.
Functions flagged ``vectorized`` take a ``(K, m)`` array of points and return
one result per row, which lets callers evaluate all perturbed points at once.
"""
import numpy as np

EPS = np.finfo(float).eps
GRAD_POWER = 1.0 / 3.0
HESS_POWER = 1.0 / 4.0


class NumericalDerivativeError(ArithmeticError):
    pass


def step_sizes(x, power=GRAD_POWER):
    x = np.asarray(x, dtype=float)
    return EPS**power * np.maximum(1.0, np.abs(x))


def central_points(x, h):
    """Rows ``x + h_a e_a`` for every a, followed by rows ``x - h_a e_a``."""
    x = np.asarray(x, dtype=float)
    shift = np.diag(h)
    return np.concatenate([x + shift, x - shift])


def jacobian(f, x, h=None, vectorized=False):
    """Central-difference derivative of ``f`` at ``x``.

    The result has the derivative index last: shape ``f(x).shape + (m,)``.
    """
    x = np.asarray(x, dtype=float)
    m = len(x)
    h = step_sizes(x) if h is None else np.asarray(h, dtype=float)
    pts = central_points(x, h)
    if vectorized:
        vals = np.asarray(f(pts), dtype=float)
    else:
        vals = np.array([np.asarray(f(pt), dtype=float) for pt in pts])
    diff = (vals[:m] - vals[m:]) / _expand(2.0 * h, vals.ndim - 1)
    out = np.moveaxis(diff, 0, -1)
    if not np.all(np.isfinite(out)):
        raise NumericalDerivativeError("non-finite finite-difference derivative")
    return out


def gradient(f, x, h=None, vectorized=False):
    return jacobian(f, x, h=h, vectorized=vectorized)


def hessian(f, x, h=None):
    """Second differences of a scalar function (no symmetrization)."""
    x = np.asarray(x, dtype=float)
    m = len(x)
    h = step_sizes(x, HESS_POWER) if h is None else np.asarray(h, dtype=float)
    out = np.empty((m, m))
    f0 = f(x)
    for a in range(m):
        ea = np.zeros(m)
        ea[a] = h[a]
        out[a, a] = (f(x + 2 * ea) - 2 * f0 + f(x - 2 * ea)) / (4 * h[a] ** 2)
        for b in range(a):
            eb = np.zeros(m)
            eb[b] = h[b]
            val = (f(x + ea + eb) - f(x + ea - eb) - f(x - ea + eb) + f(x - ea - eb)) / (4 * h[a] * h[b])
            out[a, b] = out[b, a] = val
    if not np.all(np.isfinite(out)):
        raise NumericalDerivativeError("non-finite finite-difference Hessian")
    return out


def _expand(h, extra_dims):
    return h.reshape(h.shape + (1,) * extra_dims)
