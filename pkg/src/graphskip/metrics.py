"""Segmentation metrics over binarized predictions: DSC, mIoU, MAE, HD95."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyMaskError, ShapeError, ValidationError

BINARIZE_THRESHOLD = 0.5
HD_PERCENTILE = 95.0


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def binarize(prob: np.ndarray, threshold: float = BINARIZE_THRESHOLD) -> np.ndarray:
    """Threshold a soft map; exactly-threshold pixels count as foreground."""
    return (np.asarray(prob, dtype=np.float64) >= threshold).astype(np.float64)


def _binary_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    for m in (a, b):
        if not np.all((m == 0.0) | (m == 1.0)):
            raise ValidationError("metric inputs must be binary; binarize first")
    return a > 0.5, b > 0.5


def confusion(a, b) -> ConfusionCounts:
    """Pixel confusion counts treating a as prediction and b as truth."""
    pa, pb = _binary_pair(a, b)
    return ConfusionCounts(int(np.sum(pa & pb)), int(np.sum(pa & ~pb)),
                           int(np.sum(~pa & pb)), int(np.sum(~pa & ~pb)))


def dsc(a, b) -> float:
    """Dice similarity 2TP/(2TP+FP+FN); two empty masks score 1."""
    c = confusion(a, b)
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2.0 * c.tp / denom


def miou(a, b) -> float:
    """Intersection over union TP/(TP+FP+FN); two empty masks score 1."""
    c = confusion(a, b)
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def mae(a, b) -> float:
    """Mean absolute difference; accepts soft maps."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"map shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def _directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # exact Euclidean distance from every src pixel to its nearest dst pixel
    field = ndimage.distance_transform_edt(~dst)
    return np.sort(field[src])


def hd95(a, b) -> float:
    """Max of the two directed 95th-percentile foreground distances."""
    pa, pb = _binary_pair(a, b)
    if pa.ndim != 2:
        raise ShapeError(f"hd95 expects 2D masks, got {pa.ndim}D")
    if not pa.any() or not pb.any():
        raise EmptyMaskError("hd95 is undefined for an empty mask")
    forward = np.percentile(_directed_distances(pa, pb), HD_PERCENTILE)
    backward = np.percentile(_directed_distances(pb, pa), HD_PERCENTILE)
    return float(max(forward, backward))


def score_prediction(prob, mask, threshold: float = BINARIZE_THRESHOLD) -> dict:
    """Per-image metric bundle; hd95 is NaN when either mask is empty."""
    pred = binarize(prob, threshold)
    out = {"dsc": dsc(pred, mask), "miou": miou(pred, mask),
           "mae": mae(prob, mask)}
    try:
        out["hd95"] = hd95(pred, mask)
    except EmptyMaskError:
        out["hd95"] = float("nan")
    return out
