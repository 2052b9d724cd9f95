"""Predictive uncertainty from a conditional normalizing flow combined with an MLP predictor.

The flow models ``p(y | x)`` and yields the aleatoric variance; its latent
``z`` is concatenated with ``x`` as predictor input, and MC dropout (or an
ensemble) on that predictor yields the epistemic variance.
"""

__version__ = "0.1.0"

from .data import Dataset, Normalizer, load_csv, normalize_apply, normalize_fit, split, synth_heteroscedastic  # noqa: E402
from .flow import FlowModel, build_flow, log_prob, sample, train_flow  # noqa: E402
from .hybrid import HybridConfig, HybridModel, UncertaintyReport, fit_hybrid, predict_with_uncertainty  # noqa: E402

__all__ = [
    "Dataset",
    "Normalizer",
    "load_csv",
    "normalize_apply",
    "normalize_fit",
    "split",
    "synth_heteroscedastic",
    "FlowModel",
    "build_flow",
    "log_prob",
    "sample",
    "train_flow",
    "HybridConfig",
    "HybridModel",
    "UncertaintyReport",
    "fit_hybrid",
    "predict_with_uncertainty",
]
