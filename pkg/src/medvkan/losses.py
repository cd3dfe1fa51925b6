"""Segmentation training losses: soft Dice, cross-entropy and deep supervision."""
from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import Node, as_node

DICE_SMOOTH = 1e-5
DS_WEIGHTS = (1.0, 0.5, 0.25, 0.125)


def one_hot(mask, num_classes, dtype=np.float64) -> np.ndarray:
    """B×H×W integer mask -> B×K×H×W one-hot array."""
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        raise ValueError(f"label values must lie in [0, {num_classes}), got range [{mask.min()}, {mask.max()}]")
    eye = np.eye(num_classes, dtype=dtype)
    return np.ascontiguousarray(np.moveaxis(eye[mask], -1, 1))


def _check_pair(pred, mask):
    if pred.ndim != 4 or np.ndim(mask) != 3:
        raise ValueError(f"expected B×K×H×W predictions and B×H×W mask, got {pred.shape} and {np.shape(mask)}")
    b, _, h, w = pred.shape
    if np.shape(mask) != (b, h, w):
        raise ValueError(f"mask shape {np.shape(mask)} does not match predictions {pred.shape}")


def soft_dice_loss(probs, mask, smooth=DICE_SMOOTH) -> Node:
    """1 - (2 Σ p·y + ε) / (Σ p + Σ y + ε), averaged over batch and all classes."""
    probs = as_node(probs)
    _check_pair(probs, mask)
    y = one_hot(mask, probs.shape[1], probs.dtype)
    inter = (probs * y).sum(axis=(2, 3))
    denom = probs.sum(axis=(2, 3)) + y.sum(axis=(2, 3))
    dice = (2.0 * inter + smooth) / (denom + smooth)
    return 1.0 - dice.mean()


def cross_entropy_loss(logits, mask) -> Node:
    """Mean negative log-likelihood of the true class over all pixels."""
    logits = as_node(logits)
    _check_pair(logits, mask)
    y = one_hot(mask, logits.shape[1], logits.dtype)
    logp = F.log_softmax(logits, axis=1)
    return -(logp * y).sum(axis=1).mean()


def downsample_mask(mask, factor: int) -> np.ndarray:
    """Nearest-neighbour label downsampling (top-left sample of each cell)."""
    mask = np.asarray(mask)
    if factor == 1:
        return mask
    return np.ascontiguousarray(mask[:, ::factor, ::factor])


def stage_loss(logits, mask) -> Node:
    """Dice + cross-entropy for one output head against a matching-size mask."""
    logits = as_node(logits)
    return soft_dice_loss(F.softmax(logits, axis=1), mask) + cross_entropy_loss(logits, mask)


def deep_supervision_loss(logits_list, mask, weights=DS_WEIGHTS) -> Node:
    """Σ_k α_k (dice_k + ce_k) with the mask downsampled to each head's scale."""
    if len(logits_list) != len(weights):
        raise ValueError(f"got {len(logits_list)} outputs for {len(weights)} loss weights")
    mask = np.asarray(mask)
    total = None
    for logits, alpha in zip(logits_list, weights):
        logits = as_node(logits)
        factor = mask.shape[1] // logits.shape[2]
        if factor * logits.shape[2] != mask.shape[1]:
            raise ValueError(f"output {logits.shape} is not an integer downscale of mask {mask.shape}")
        term = stage_loss(logits, downsample_mask(mask, factor)) * alpha
        total = term if total is None else total + term
    return total
