"""Scalable spatiotemporal forecasting with modulated node attention.

Subpackages: ``grad`` (reverse-mode tape), ``graphs`` (topologies, GP-VAR,
POD), ``diffusion`` (graph diffusion and denoising), ``model`` (ScaleSTF),
``training`` (data pipeline, Adam, metrics), ``io`` and ``cli``.
"""

from .errors import (
    CapacityError,
    ConfigError,
    ConvergenceError,
    DataError,
    DimensionError,
    EmptyMaskWarning,
    InstabilityError,
    NumericalError,
    ScaleSTFError,
)
from .model import ModelConfig, init_params, model_forward, param_count, predict
from .training import ForecastData, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "CapacityError", "ConfigError", "ConvergenceError", "DataError", "DimensionError", "EmptyMaskWarning",
    "InstabilityError", "NumericalError", "ScaleSTFError",
    "ModelConfig", "init_params", "model_forward", "param_count", "predict",
    "ForecastData", "TrainConfig", "evaluate", "train",
]
