"""Estimators: maximum likelihood, the reduced-bias variants, resampling corrections and REML."""
from .ml import fit_ml
from .results import BoundsPolicy, FitResult, check_acceptable, default_bounds, start_values
from .rbm import fit_erbm, fit_irbm, rbm_penalty, rbm_penalty_gradient
from .resampling import bootstrap_correct, jackknife_correct
from .reml import RemlObjective, fit_reml_gcm, reml_loglik
