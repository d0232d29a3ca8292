"""Attention and vision-token distillation for a toy vision-language model."""

from .losses import LossConfig, LossReport, Projectors, align_kd_objective
from .tensor import Tensor, backward, grad_check, no_grad
from .train import Trainer, TrainConfig, evaluate, run_training
from .vlm import ToyVLM, VlmConfig

__all__ = [
    "LossConfig",
    "LossReport",
    "Projectors",
    "align_kd_objective",
    "Tensor",
    "backward",
    "grad_check",
    "no_grad",
    "Trainer",
    "TrainConfig",
    "evaluate",
    "run_training",
    "ToyVLM",
    "VlmConfig",
]
