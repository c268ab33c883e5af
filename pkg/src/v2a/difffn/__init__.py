"""Differentiable-computation substrate: approximators, gradients, optimizer."""

from . import autodiff
from .checkpoint import load_params, load_sidecar, save_params
from .nets import (
    LOGVAR_MAX,
    LOGVAR_MIN,
    GaussianHead,
    MLPApproximator,
    ParamVector,
    RecurrentEncoder,
    build_params,
    forward,
    gaussian_log_density,
    gaussian_log_density_rows,
    gradient,
)
from .optim import MomentState, sgd_step

__all__ = [
    "autodiff",
    "GaussianHead",
    "MLPApproximator",
    "MomentState",
    "ParamVector",
    "RecurrentEncoder",
    "LOGVAR_MIN",
    "LOGVAR_MAX",
    "build_params",
    "forward",
    "gaussian_log_density",
    "gaussian_log_density_rows",
    "gradient",
    "load_params",
    "load_sidecar",
    "save_params",
    "sgd_step",
]
