"""Single-stage detector with optional temporal and attention stages."""

from .checkpoint import load_model, read_checkpoint, save_checkpoint, warm_start
from .config import VARIANTS, ModelConfig, TrainConfig
from .head import assign_targets, decode
from .loss import detection_loss
from .model import Model, build_model, forward
from .train import NumericError, evaluate_videos, fit

__all__ = [
    "VARIANTS", "Model", "ModelConfig", "NumericError", "TrainConfig", "assign_targets", "build_model",
    "decode", "detection_loss", "evaluate_videos", "fit", "forward", "load_model", "read_checkpoint",
    "save_checkpoint", "warm_start",
]
