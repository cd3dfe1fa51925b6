"""Hybrid convolution / selective-scan / KAN U-shaped segmentation network on numpy."""
from .data import Sample, load_manifest, read_tensor, synth_dataset, write_dataset, write_tensor
from .estimator import MedVKANSegmenter, check_images, check_masks
from .losses import cross_entropy_loss, deep_supervision_loss, soft_dice_loss
from .metrics import MetricsReport, dice_score, instance_f1, iou_score, nsd_score
from .model import ModelConfig, forward, init_params, param_count
from .training import (TrainConfig, adamw_step, checkpoint_load, checkpoint_save, cosine_lr, evaluate,
                       train)

__version__ = "0.1.0"

__all__ = [
    "MedVKANSegmenter",
    "MetricsReport",
    "ModelConfig",
    "Sample",
    "TrainConfig",
    "adamw_step",
    "check_images",
    "check_masks",
    "checkpoint_load",
    "checkpoint_save",
    "cosine_lr",
    "cross_entropy_loss",
    "deep_supervision_loss",
    "dice_score",
    "evaluate",
    "forward",
    "init_params",
    "instance_f1",
    "iou_score",
    "load_manifest",
    "nsd_score",
    "param_count",
    "read_tensor",
    "soft_dice_loss",
    "synth_dataset",
    "train",
    "write_dataset",
    "write_tensor",
]
