"""Saliency-balancing location-scale augmentation engine and training harness."""

from .core import AugConfig, RandomStream, decompose_by_class, minmax_normalize, recompose
from .nnet import TinySegNet, TrainConfig, Trainer, dice_score, seg_loss

__all__ = [
    "AugConfig",
    "RandomStream",
    "decompose_by_class",
    "minmax_normalize",
    "recompose",
    "TinySegNet",
    "TrainConfig",
    "Trainer",
    "dice_score",
    "seg_loss",
]
