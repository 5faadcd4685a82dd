"""Segmentation and mask overlap metrics."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, DataError
from .tensor import as_mask


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """IoU of the adversarial regions (zeros) of two defense masks; 1.0 if both are empty."""
    p, g = as_mask(pred), as_mask(gt)
    if p.shape != g.shape:
        raise ConfigError(f"mask dims differ: {p.shape} vs {g.shape}")
    pa, ga = p == 0, g == 0
    union = int((pa | ga).sum())
    if union == 0:
        return 1.0
    return int((pa & ga).sum()) / union


def miou(pred_labels: np.ndarray, gt_labels: np.ndarray, class_count: int) -> float:
    """Mean per-class IoU over classes present in either map."""
    p, g = np.asarray(pred_labels), np.asarray(gt_labels)
    if p.shape != g.shape:
        raise ConfigError(f"label maps differ in shape: {p.shape} vs {g.shape}")
    for name, arr in (("prediction", p), ("ground truth", g)):
        if arr.size and (arr.min() < 0 or arr.max() >= class_count):
            raise DataError(f"{name} has labels outside [0, {class_count})")
    ious = []
    for c in range(class_count):
        pc, gc = p == c, g == c
        union = int((pc | gc).sum())
        if union:
            ious.append(int((pc & gc).sum()) / union)
    return float(np.mean(ious)) if ious else 1.0
