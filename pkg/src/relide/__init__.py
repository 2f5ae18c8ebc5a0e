"""Reliability analysis of noisy limit states with a noise-aware Gaussian process.

The noise-free failure probability ``P(g(X) <= 0)`` is estimated from noisy
evaluations ``g(x) + eps`` by an active-learning loop that trains a Gaussian
process with a learned nugget and enriches the design with the U_N criterion.
"""

from .active import LoopConfig, LoopState, LearnScore, lookahead_var, pm, run, select_batch, un_score
from .gp import Design, FitOptions, GpModel, fit, neg_log_likelihood, predict, predict_batch
from .inputs import Gaussian, Lognormal, ProbInput, TruncatedGaussian
from .limitstate import (ExternalModel, LimitState, calibrate_noise, corrupt, external_model,
                         four_branch, hat, rs)
from .reliability import RelResult, mcs, rs_analytic, subset

__version__ = "0.1.0"

__all__ = [
    "Design", "ExternalModel", "FitOptions", "Gaussian", "GpModel", "LearnScore", "LimitState",
    "Lognormal", "LoopConfig", "LoopState", "ProbInput", "RelResult", "TruncatedGaussian",
    "calibrate_noise", "corrupt", "external_model", "fit", "four_branch", "hat",
    "lookahead_var", "mcs", "neg_log_likelihood", "pm", "predict", "predict_batch", "rs",
    "rs_analytic", "run", "select_batch", "subset", "un_score",
]
