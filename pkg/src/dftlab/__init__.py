"""Desk-scale lab for dynamically reweighted fine-tuning objectives."""

from .autodiff import ComputationRecord, Tensor, backward, stop_gradient
from .losses import LossSpec, TokenDiagnostics
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .tasks import Demonstration, TaskSpec
from .training import RunConfig, TrainingAborted, train_run

__all__ = [
    "ComputationRecord",
    "Tensor",
    "backward",
    "stop_gradient",
    "LossSpec",
    "TokenDiagnostics",
    "Model",
    "ModelConfig",
    "load_checkpoint",
    "save_checkpoint",
    "Demonstration",
    "TaskSpec",
    "RunConfig",
    "TrainingAborted",
    "train_run",
]
