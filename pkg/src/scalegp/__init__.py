"""Scalable Gaussian-process forecasting of hourly traffic series.

Training splits a series across K workers and reaches a common set of
kernel hyperparameters by consensus ADMM; prediction fuses the K local
posteriors with validation-optimized product-of-experts weights.
"""

from .admm import AdmmConfig, train
from .data import SyntheticSpec, TimeSeriesDataset, generate, load_csv, mape, rmse
from .fusion import fuse, mirror_descent, predict_fused, solve_qp_single
from .gp import LocalModel, Shard, fit_local, nll, nll_and_grad, predict
from .kernel import HyperParams, KernelSpec

__version__ = "0.1.0"

__all__ = [
    "AdmmConfig",
    "HyperParams",
    "KernelSpec",
    "LocalModel",
    "Shard",
    "SyntheticSpec",
    "TimeSeriesDataset",
    "fit_local",
    "fuse",
    "generate",
    "load_csv",
    "mape",
    "mirror_descent",
    "nll",
    "nll_and_grad",
    "predict",
    "predict_fused",
    "rmse",
    "solve_qp_single",
    "train",
]
