"""Structural equation models with reduced-bias M-estimation.

Maximum likelihood, explicit and implicit reduced-bias estimators, bootstrap
and jackknife corrections and REML, together with a data generator and a
simulation-study harness.
"""
__version__ = "0.1.0"

from .datagen import NONNORMAL, NORMAL, DistributionSpec, fleishman_coeffs, simulate
from .estimators import (
    BoundsPolicy, FitResult, bootstrap_correct, check_acceptable, default_bounds, fit_erbm, fit_irbm,
    fit_ml, fit_reml_gcm, jackknife_correct, rbm_penalty,
)
from .likelihood import (
    DataSummary, info_e, info_j, loglik, obs_scores, sandwich, score_gcm, score_general,
    score_two_factor,
)
from .model import (
    ModelSpec, ParamVector, implied_moments, load_spec, pack, reliability, spec_from_dict, unpack,
)
from .presets import gcm, get_preset, true_theta, two_factor
