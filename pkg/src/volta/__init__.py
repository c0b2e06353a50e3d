"""Prototype-based classification with calibrated uncertainty for frozen features."""

from .errors import ConfigError, DegenerateInputError, InvalidArgumentError, NumericFailure, VoltaError
from .model import EncoderConfig, VoltaModel, forward, init_model, load_model, predict, save_model
from .training import TrainConfig, train
from .calibration import fit_temperature
from .metrics import MetricsReport, evaluate

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DegenerateInputError", "InvalidArgumentError", "NumericFailure", "VoltaError",
    "EncoderConfig", "VoltaModel", "forward", "init_model", "load_model", "predict", "save_model",
    "TrainConfig", "train", "fit_temperature", "MetricsReport", "evaluate",
]
