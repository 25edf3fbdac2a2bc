"""Adaptive patching for time-series forecasting, with a numpy autodiff core."""

__version__ = "0.1.0"

from .backbone import Backbone, BackboneConfig, aux_loss
from .forecaster import Forecaster, LossConfig, ModelConfig, composite_loss, evaluate, huber, schedule_horizons
from .patcher import PatchConfig, PatchPlan, calibrate_tau, compress, detect_boundaries, unpatch
from .series_io import DataError, TimeSeries, WindowSpec, load_csv, make_windows, standardize, synth
from .tensor import ParamStore, Tape, Tensor, grad_check
from .trainer import TrainConfig, load_checkpoint, lr_at, train

__all__ = [
    "Backbone", "BackboneConfig", "DataError", "Forecaster", "LossConfig", "ModelConfig", "ParamStore",
    "PatchConfig", "PatchPlan", "Tape", "Tensor", "TimeSeries", "TrainConfig", "WindowSpec", "aux_loss",
    "calibrate_tau", "composite_loss", "compress", "detect_boundaries", "evaluate", "grad_check", "huber",
    "load_checkpoint", "load_csv", "lr_at", "make_windows", "schedule_horizons", "standardize", "synth",
    "train", "unpatch",
]
