"""Exogenous-guided continuous-time forecasting (EgPDE-Net) on a numpy autodiff core."""

from .autodiff import Tensor, backward, grad_check, no_grad
from .data import (RawSeries, load_csv, make_windows, prepare, resample_half, split_chronological,
                   synthetic_series)
from .evaluation import aggregate_runs, evaluate_arbitrary, mae, rmse
from .model import AblationMode, EgPDENet, ModelConfig, forecast, param_count
from .ode import SolverConfig, dopri5_solve, ode_solve, rk4_step
from .training import TrainConfig, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
