"""Losses, SGD training, density sweeps and the reparameterization probe."""

from .loop import EpochLog, EvalResult, TrainConfig, evaluate, log_to_csv, train
from .loss import (
    LossReport,
    NumericalError,
    cross_entropy,
    lasso_saliency,
    mean_saliency_l1,
    sgd_step,
)
from .probe import ProbeConfig, ProbeReport, reparam_probe
from .sweep import SweepPoint, density_sweep, parse_schedule, step_schedule
