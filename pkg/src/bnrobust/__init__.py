"""Numpy-only pre-activation ResNets, PGD adversarial training and BN fine-tuning experiments."""

from .tensor import Tensor, debug_mode, default_dtype, no_grad
from .nn import PreActResNet, ResNetConfig, build_resnet
from .attacks import AttackSpec, evaluate_robust_error, fgsm, pgd, random_search_attack
from .training import FreezeMask, TrainConfig, finetune, make_freeze_mask, train
from .checkpoint import load_model, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "debug_mode",
    "default_dtype",
    "PreActResNet",
    "ResNetConfig",
    "build_resnet",
    "AttackSpec",
    "fgsm",
    "pgd",
    "random_search_attack",
    "evaluate_robust_error",
    "FreezeMask",
    "TrainConfig",
    "make_freeze_mask",
    "train",
    "finetune",
    "save_checkpoint",
    "load_model",
]
