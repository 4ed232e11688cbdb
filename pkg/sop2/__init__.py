"""Scene-oriented prompt pools for parameter-efficient tuning of sparse-voxel 3D detectors."""

from .backbone import Sop2Detector, detection_loss, model_forward
from .config import ModelConfig, PromptMode, RunConfig, TrainConfig, TuningMode, desk_config, full_config
from .errors import Sop2Error
from .tuner import build_model, count_params, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "PromptMode",
    "RunConfig",
    "Sop2Detector",
    "Sop2Error",
    "TrainConfig",
    "TuningMode",
    "build_model",
    "count_params",
    "desk_config",
    "detection_loss",
    "evaluate",
    "full_config",
    "model_forward",
    "train",
]
