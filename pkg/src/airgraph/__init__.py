"""Adaptive-graph spatio-temporal forecasting of station air-quality series."""

from .tensor import Tensor, no_grad
from .model import ModelConfig, STForecaster
from .config import RunConfig

__all__ = ["Tensor", "no_grad", "ModelConfig", "STForecaster", "RunConfig"]
__version__ = "0.1.0"
