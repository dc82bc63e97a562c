"""Segmentation metrics and the combined cross-entropy / Dice loss."""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError

__all__ = ["DomainError", "dice_hard", "dice_soft", "dice_soft_grad", "bce", "bce_grad",
           "bce_dice_loss", "threshold_mask", "THRESHOLD", "BCE_CLIP", "DICE_SMOOTH"]

BCE_CLIP = 1e-7
DICE_SMOOTH = 1.0
# prediction p maps to p * 255 and is kept when that is >= 128
THRESHOLD = 128.0 / 255.0


class DomainError(ValueError):
    pass


def _pair(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _require_binary(*masks):
    for m in masks:
        if not np.isin(m, (0, 1)).all():
            raise DomainError("mask values must be 0 or 1")


def dice_hard(pred_mask, target) -> float:
    """``2 |X & Y| / (|X| + |Y|)``; two empty masks score 1."""
    x, y = _pair(pred_mask, target)
    _require_binary(x, y)
    x = x.astype(bool)
    y = y.astype(bool)
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(x & y)) / total


def dice_soft(pred, target, smooth: float = DICE_SMOOTH) -> float:
    p, y = _pair(pred, target)
    p = p.astype(np.float64)
    y = y.astype(np.float64)
    return float((2.0 * np.sum(p * y) + smooth) / (np.sum(p) + np.sum(y) + smooth))


def dice_soft_grad(pred, target, smooth: float = DICE_SMOOTH) -> np.ndarray:
    p, y = _pair(pred, target)
    p = p.astype(np.float64)
    y = y.astype(np.float64)
    num = 2.0 * np.sum(p * y) + smooth
    den = np.sum(p) + np.sum(y) + smooth
    return (2.0 * y * den - num) / den ** 2


def bce(pred, target, clip: float = BCE_CLIP) -> float:
    p, y = _pair(pred, target)
    p = np.clip(p.astype(np.float64), clip, 1.0 - clip)
    y = y.astype(np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def bce_grad(pred, target, clip: float = BCE_CLIP) -> np.ndarray:
    p, y = _pair(pred, target)
    p = p.astype(np.float64)
    y = y.astype(np.float64)
    inside = (p > clip) & (p < 1.0 - clip)
    pc = np.clip(p, clip, 1.0 - clip)
    return np.where(inside, (pc - y) / (pc * (1.0 - pc)), 0.0) / p.size


def bce_dice_loss(pred, target, smooth: float = DICE_SMOOTH) -> tuple[float, np.ndarray]:
    """``BCE - Dice + 1`` and its gradient wrt ``pred`` (same dtype as pred)."""
    p = np.asarray(pred)
    loss = bce(p, target) - dice_soft(p, target, smooth) + 1.0
    grad = bce_grad(p, target) - dice_soft_grad(p, target, smooth)
    dtype = p.dtype if np.issubdtype(p.dtype, np.floating) else np.float64
    return loss, grad.astype(dtype, copy=False)


def threshold_mask(pred) -> np.ndarray:
    p = np.asarray(pred)
    return (p >= THRESHOLD).astype(np.uint8)
