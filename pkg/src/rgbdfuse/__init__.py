"""Attention-weighted RGB-D fusion classifier on a self-contained autodiff core."""

from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward, finite_diff_grad, no_grad, parameter
from .trainer import RunReport, ablate, evaluate, gradcheck, train

__all__ = [
    "ModelConfig",
    "RunReport",
    "Tensor",
    "ablate",
    "backward",
    "build_model",
    "evaluate",
    "finite_diff_grad",
    "gradcheck",
    "load_checkpoint",
    "no_grad",
    "parameter",
    "save_checkpoint",
    "train",
]
