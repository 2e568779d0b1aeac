"""Built-in models: the two-factor SEM and the linear latent growth curve model."""
from __future__ import annotations

import numpy as np

from .model import MatrixPattern, ModelSpec, ParamVector, SpecError

PRESETS = ("two_factor", "gcm")
RELIABILITIES = ("high", "low")

TWO_FACTOR_TRUTH = {
    "high": {
        "lambda21": 0.7, "lambda31": 0.6, "lambda52": 0.7, "lambda62": 0.6, "beta": 0.25,
        "theta11": 0.25, "theta22": 0.1225, "theta33": 0.09,
        "theta44": 0.25, "theta55": 0.1225, "theta66": 0.09,
        "psi11": 1.0, "psi22": 1.0,
    },
    "low": {
        "lambda21": 0.7, "lambda31": 0.6, "lambda52": 0.7, "lambda62": 0.6, "beta": 0.25,
        "theta11": 1.0, "theta22": 0.49, "theta33": 0.36,
        "theta44": 1.0, "theta55": 0.49, "theta66": 0.36,
        "psi11": 1.0, "psi22": 1.0,
    },
}

GCM_TRUTH = {
    "high": {"alpha1": 0.0, "alpha2": 0.0, "psi11": 550.0, "psi22": 100.0, "psi12": 40.0, "theta11": 500.0},
    "low": {"alpha1": 0.0, "alpha2": 0.0, "psi11": 275.0, "psi22": 50.0, "psi12": 20.0, "theta11": 1300.0},
}

# acceptability thresholds on standard errors
SE_THRESHOLD = {"two_factor": 5.0, "gcm": 500.0}


def _free(shape):
    return -np.ones(shape, dtype=int)


def two_factor(mean_structure: bool = False) -> ModelSpec:
    """Two factors with three indicators each and a regression of eta2 on eta1.

    The first indicator of each factor is the scale anchor (loading 1).
    Without a mean structure (the default) the model has 13 parameters and is
    fitted to centred data; with it, the six free intercepts come first.
    """
    p, q = 6, 2
    labels = []
    nu_free = _free((p, 1))
    if mean_structure:
        for i in range(p):
            nu_free[i, 0] = len(labels)
            labels.append(f"nu{i + 1}")

    lam_fixed = np.zeros((p, q))
    lam_fixed[0, 0] = lam_fixed[3, 1] = 1.0
    lam_free = _free((p, q))
    for i, j in ((1, 0), (2, 0), (4, 1), (5, 1)):
        lam_free[i, j] = len(labels)
        labels.append(f"lambda{i + 1}{j + 1}")

    b_free = _free((q, q))
    b_free[1, 0] = len(labels)
    labels.append("beta")

    th_free = _free((p, p))
    for i in range(p):
        th_free[i, i] = len(labels)
        labels.append(f"theta{i + 1}{i + 1}")

    psi_free = _free((q, q))
    for k in range(q):
        psi_free[k, k] = len(labels)
        labels.append(f"psi{k + 1}{k + 1}")

    return ModelSpec(
        p=p, q=q,
        nu=MatrixPattern(np.zeros((p, 1)), nu_free),
        lambda_=MatrixPattern(lam_fixed, lam_free),
        theta=MatrixPattern(np.zeros((p, p)), th_free, "diagonal"),
        alpha=MatrixPattern.zeros(q, 1),
        bmat=MatrixPattern(np.zeros((q, q)), b_free),
        psi=MatrixPattern(np.zeros((q, q)), psi_free, "diagonal"),
        labels=tuple(labels), mean_structure=mean_structure, name="two_factor",
    )


def gcm(n_occasions: int = 10, random_slope: bool = True) -> ModelSpec:
    """Linear latent growth curve: intercept loadings 1, slope loadings 0..T-1,
    one residual variance shared by all occasions.

    Parameters are ``alpha1, alpha2, psi11, psi22, psi12, theta11``.  With
    ``random_slope=False`` the slope variance and covariance are fixed at 0,
    leaving ``alpha1, alpha2, psi11, theta11``.
    """
    p, q = n_occasions, 2
    lam = np.column_stack([np.ones(p), np.arange(p, dtype=float)])
    alpha_free = np.array([[0], [1]])
    th_free = _free((p, p))
    if random_slope:
        psi_free = np.array([[2, 4], [4, 3]])
        np.fill_diagonal(th_free, 5)
        labels = ("alpha1", "alpha2", "psi11", "psi22", "psi12", "theta11")
    else:
        psi_free = np.array([[2, -1], [-1, -1]])
        np.fill_diagonal(th_free, 3)
        labels = ("alpha1", "alpha2", "psi11", "theta11")
    return ModelSpec(
        p=p, q=q,
        nu=MatrixPattern.zeros(p, 1),
        lambda_=MatrixPattern(lam, _free((p, q))),
        theta=MatrixPattern(np.zeros((p, p)), th_free, "diagonal"),
        alpha=MatrixPattern(np.zeros((q, 1)), alpha_free),
        bmat=MatrixPattern.zeros(q, q),
        psi=MatrixPattern(np.zeros((q, q)), psi_free, "symmetric"),
        labels=labels, mean_structure=True, name="gcm",
    )


def get_preset(name: str, **options) -> ModelSpec:
    if name == "two_factor":
        return two_factor(**options)
    if name == "gcm":
        return gcm(**options)
    raise SpecError(f"unknown preset {name!r}; choose from {PRESETS}")


def true_theta(spec: ModelSpec, reliability: str = "high") -> ParamVector:
    """Population values for a preset at ``"high"`` (about 0.8) or ``"low"`` (about 0.5) reliability.

    Free intercepts of the two-factor model are 0.
    """
    if reliability not in RELIABILITIES:
        raise ValueError(f"reliability must be one of {RELIABILITIES}")
    if spec.name == "two_factor":
        table = TWO_FACTOR_TRUTH[reliability]
    elif spec.name == "gcm":
        table = GCM_TRUTH[reliability]
    else:
        raise SpecError(f"no population values for model {spec.name!r}")
    return spec.param_vector([table.get(lab, 0.0) for lab in spec.labels])


def se_threshold(spec: ModelSpec) -> float:
    return SE_THRESHOLD.get(spec.name, np.inf)
