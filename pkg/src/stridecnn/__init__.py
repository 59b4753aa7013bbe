"""Stride length regression from stride-specific inertial sensor data with a 1D CNN."""

__version__ = "0.1.0"

from .evaluation import EvaluationReport, cross_validate
from .network import DESK_CONFIG, FULL_CONFIG, REDUCED_CONFIG, NetworkConfig, NetworkParams, forward, predict
from .preprocessing import PreprocessedStride, RawStride, StrideDefinition, preprocess
from .training import TrainConfig, train

__all__ = [
    "EvaluationReport",
    "cross_validate",
    "DESK_CONFIG",
    "FULL_CONFIG",
    "REDUCED_CONFIG",
    "NetworkConfig",
    "NetworkParams",
    "forward",
    "predict",
    "PreprocessedStride",
    "RawStride",
    "StrideDefinition",
    "preprocess",
    "TrainConfig",
    "train",
]
