"""Joint optic disc / fovea detection and segmentation on a numpy autodiff core."""

from .config import RunConfig, load_config
from .data import Box, Sample, SceneSpec, generate, read_dataset, write_dataset
from .estimator import UOLOEstimator
from .exceptions import (ConfigurationError, DataError, NumericError, TapeError, UOLOError,
                         UsageError)
from .model import ModelConfig, UOLOModel, build_model
from .segnet import SegNetConfig
from .trainer import LossLedger, TrainConfig, evaluate, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Box",
    "ConfigurationError",
    "DataError",
    "LossLedger",
    "ModelConfig",
    "NumericError",
    "RunConfig",
    "Sample",
    "SceneSpec",
    "SegNetConfig",
    "TapeError",
    "TrainConfig",
    "UOLOError",
    "UOLOEstimator",
    "UOLOModel",
    "UsageError",
    "build_model",
    "evaluate",
    "fit",
    "generate",
    "load_checkpoint",
    "load_config",
    "read_dataset",
    "save_checkpoint",
    "write_dataset",
]
