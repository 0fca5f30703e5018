"""Weighted focal loss and mean-IoU."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, DimensionError, MaskError

PROB_FLOOR = 1e-12
WEIGHT_MIN = 1.0 / math.log(2.1)
WEIGHT_MAX = 1.0 / math.log(1.1)


@dataclass(frozen=True)
class FocalConfig:
    gamma: float = 2.0
    weight_mode: str = "inverse_log_frequency"

    def __post_init__(self):
        if not math.isfinite(self.gamma) or self.gamma < 0:
            raise ConfigError(f"focal gamma must be finite and >= 0, got {self.gamma}")
        if self.weight_mode not in ("inverse_log_frequency", "uniform"):
            raise ConfigError(f"unknown weight_mode {self.weight_mode!r}")


@dataclass
class ClassFrequencyTable:
    counts: np.ndarray
    weights: np.ndarray

    @property
    def fractions(self) -> np.ndarray:
        return self.counts / self.counts.sum()


def _check_mask(mask: np.ndarray, num_classes: int) -> np.ndarray:
    m = np.asarray(mask)
    if m.size == 0:
        raise MaskError("empty mask")
    ids = m.astype(np.int64)
    if np.any(ids != m) or ids.min() < 0 or ids.max() >= num_classes:
        raise MaskError(f"mask values must be integers in [0, {num_classes - 1}]")
    return ids


def class_frequencies(mask, num_classes: int) -> ClassFrequencyTable:
    ids = _check_mask(mask.data if isinstance(mask, Tensor) else mask, num_classes)
    counts = np.bincount(ids.ravel(), minlength=num_classes).astype(np.float64)
    weights = 1.0 / np.log(1.1 + counts / counts.sum())
    return ClassFrequencyTable(counts, weights)


def class_weights(mask, num_classes: int) -> np.ndarray:
    """Inverse-log-frequency weight per class; background is class 0.

    A class with no pixels gets the largest possible weight, ``1/ln(1.1)``.
    """
    return class_frequencies(mask, num_classes).weights


def focal_loss_last(logits: Tensor, mask: np.ndarray, cfg: FocalConfig = FocalConfig(),
                    valid: np.ndarray | None = None) -> Tensor:
    """Focal loss for class-last logits ``(..., C)`` against an integer mask ``(...)``.

    Pixels where ``valid`` is False are left out of both the sum and the
    pixel count.
    """
    num_classes = logits.shape[-1]
    if logits.shape[:-1] != np.shape(mask):
        raise DimensionError(f"logits {logits.shape} and mask {np.shape(mask)} are misaligned")
    ids = _check_mask(mask, num_classes)
    if valid is None:
        valid = np.ones(ids.shape, dtype=bool)
    if not valid.any():
        raise ContractError("focal loss over zero valid pixels")
    if cfg.weight_mode == "uniform":
        weights = np.ones(num_classes)
    else:
        weights = class_weights(ids[valid], num_classes)

    onehot = np.eye(num_classes)[ids]
    probs = ag.softmax(logits, axis=-1)
    p_t = ag.tsum(probs * Tensor(onehot), axis=-1)
    p_t = ag.clamp(p_t, PROB_FLOOR, 1.0)
    per_pixel = ag.log(p_t) * Tensor(-weights[ids] * valid / valid.sum())
    if cfg.gamma != 0:
        per_pixel = per_pixel * ag.pow(1.0 - p_t, cfg.gamma)
    return ag.tsum(per_pixel)


def focal_loss(logits: Tensor, mask, cfg: FocalConfig = FocalConfig()) -> Tensor:
    """Mean focal loss for ``(N+1) x H x W`` logits and an ``H x W`` class-index mask."""
    logits = ag.as_tensor(logits)
    mask = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if logits.ndim != 3 or logits.shape[1:] != mask.shape:
        raise DimensionError(f"logits {logits.shape} and mask {mask.shape} are misaligned")
    return focal_loss_last(ag.transpose(logits, (1, 2, 0)), mask, cfg)


def iou_per_class(pred, truth, classes: Sequence[int]) -> dict[int, float]:
    pred = np.asarray(pred.data if isinstance(pred, Tensor) else pred)
    truth = np.asarray(truth.data if isinstance(truth, Tensor) else truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} and truth {truth.shape} differ")
    out = {}
    for c in classes:
        p, t = pred == c, truth == c
        union = np.count_nonzero(p | t)
        out[c] = 1.0 if union == 0 else np.count_nonzero(p & t) / union
    return out


def miou(pred, truth, classes: Sequence[int]) -> float:
    """Mean IoU over the given foreground classes.

    A class absent from both masks scores 1.
    """
    classes = [c for c in classes if c != 0]
    if not classes:
        raise ContractError("miou needs at least one foreground class")
    return float(np.mean(list(iou_per_class(pred, truth, classes).values())))


def background_iou(pred, truth) -> float:
    return iou_per_class(pred, truth, [0])[0]
