"""Deep-supervision objective: edge-weighted region losses plus boundary BCE."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .errors import ShapeError, ValidationError
from .tensor import Tensor, clamp, log, tmean, tsum

BCE_CLAMP = 1e-7
IOU_SMOOTH = 1.0
EDGE_WEIGHT_GAIN = 5.0
EDGE_WEIGHT_WINDOW = 31

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


@dataclass
class SupervisionTargets:
    """Region mask, its extracted boundary, and the per-pixel loss weights."""

    region: np.ndarray
    boundary: np.ndarray
    weights: np.ndarray


def _mask_array(mask) -> np.ndarray:
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if m.ndim != 4 or m.shape[1] != 1:
        raise ShapeError(f"masks must be (B,1,H,W), got {m.shape}")
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValidationError("mask values must be exactly 0 or 1")
    return m.astype(np.float64, copy=False)


def boundary_from_mask(mask) -> np.ndarray:
    """Binary transition map: 1 wherever the Sobel gradient magnitude is nonzero."""
    m = _mask_array(mask)
    h, w = m.shape[2:]
    padded = np.pad(m, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="reflect")
    gx = np.zeros_like(m)
    gy = np.zeros_like(m)
    for dy in range(3):
        for dx in range(3):
            window = padded[:, :, dy:dy + h, dx:dx + w]
            gx += SOBEL_X[dy, dx] * window
            gy += SOBEL_Y[dy, dx] * window
    return (gx * gx + gy * gy > 0.0).astype(np.float64)


def weight_map(mask) -> np.ndarray:
    """1 + 5*|local 31x31 mean - mask|; windows shrink at borders (valid counts)."""
    m = _mask_array(mask)
    r = EDGE_WEIGHT_WINDOW // 2
    h, w = m.shape[2:]
    integral = np.pad(m.cumsum(axis=2).cumsum(axis=3),
                      ((0, 0), (0, 0), (1, 0), (1, 0)))
    y0 = np.clip(np.arange(h) - r, 0, None)
    y1 = np.clip(np.arange(h) + r + 1, None, h)
    x0 = np.clip(np.arange(w) - r, 0, None)
    x1 = np.clip(np.arange(w) + r + 1, None, w)
    sums = (integral[:, :, y1[:, None], x1[None, :]]
            - integral[:, :, y0[:, None], x1[None, :]]
            - integral[:, :, y1[:, None], x0[None, :]]
            + integral[:, :, y0[:, None], x0[None, :]])
    counts = ((y1 - y0)[:, None] * (x1 - x0)[None, :]).astype(np.float64)
    return 1.0 + EDGE_WEIGHT_GAIN * np.abs(sums / counts - m)


def supervision_targets(mask) -> SupervisionTargets:
    """Bundle the mask with its derived boundary and weight maps."""
    m = _mask_array(mask)
    return SupervisionTargets(m, boundary_from_mask(m), weight_map(m))


def _pair(pred: Tensor, target) -> np.ndarray:
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != t.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {t.shape}")
    return t


def weighted_bce(pred: Tensor, target, weights) -> Tensor:
    """Pixel-weighted binary cross entropy, normalized by the weight total."""
    t = _pair(pred, target)
    w = _pair(pred, weights)
    p = clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    nll = -(log(p) * t + log(1.0 - p) * (1.0 - t))
    return tsum(nll * w) / float(w.sum())


def bce(pred: Tensor, target) -> Tensor:
    """Plain mean binary cross entropy."""
    t = _pair(pred, target)
    p = clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return tmean(-(log(p) * t + log(1.0 - p) * (1.0 - t)))


def weighted_iou(pred: Tensor, target, weights) -> Tensor:
    """One minus the weighted smoothed soft-intersection-over-union."""
    t = _pair(pred, target)
    w = _pair(pred, weights)
    inter = tsum(pred * t * w)
    union = tsum((pred + t - pred * t) * w)
    return 1.0 - (inter + IOU_SMOOTH) / (union + IOU_SMOOTH)


def total_loss(outputs: List[Tuple[Tensor, Tensor]],
               targets: SupervisionTargets,
               parts: Optional[dict] = None) -> Tensor:
    """Sum region (weighted IoU + weighted BCE) and boundary BCE over all stages."""
    if len(outputs) != 4:
        raise ShapeError(f"expected four output pairs, got {len(outputs)}")
    total = None
    sums = {"iou": 0.0, "region_bce": 0.0, "boundary_bce": 0.0}
    for region, boundary in outputs:
        iou = weighted_iou(region, targets.region, targets.weights)
        rbce = weighted_bce(region, targets.region, targets.weights)
        bbce = bce(boundary, targets.boundary)
        term = iou + rbce + bbce
        total = term if total is None else total + term
        sums["iou"] += float(iou.data)
        sums["region_bce"] += float(rbce.data)
        sums["boundary_bce"] += float(bbce.data)
    if parts is not None:
        parts.update(sums)
    return total
