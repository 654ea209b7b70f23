"""Gapped straight-through gradient estimation for categorical variables.

Modules:
    autodiff      -- minimal tape-based reverse-mode engine with stop_grad
    samplers      -- Gumbel / exponential / conditional perturbed-logit draws
    estimators    -- REINFORCE, ST, STGS, GR-MCK, GST, NZ-GST
    gap_analysis  -- expected top-2 perturbed-logit gap, closed form and MC
    variance      -- gradient-variance profiling and its (a)/(b) split
    vae           -- desk-scale categorical VAE benchmark
    cli           -- gapped-st command-line interface
"""

__version__ = "0.1.0"

from .autodiff import Tape, Value, stop_grad
from .estimators import EstimatorConfig, estimate, estimator_id
from .samplers import RngStream

__all__ = [
    "Tape",
    "Value",
    "stop_grad",
    "EstimatorConfig",
    "estimate",
    "estimator_id",
    "RngStream",
    "__version__",
]
