"""Entropy-scored channel selection and the spatial attention gate.

Channels are scored by the mean pixelwise value of -p*ln(p) with p = sigmoid
of the feature (not full binary entropy).  The M lowest-entropy channels feed
a 1x1 projection whose sigmoid gates every channel of the original map.
Selection indices are recomputed each forward pass and treated as constants
in backward.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import conv2d_1x1
from .tensor import Tensor, _node, mul, sigmoid

ENTROPY_LOG_EPS = 1e-12
ENTROPY_MAX = 1.0 / np.e


def channel_entropy(f: Tensor) -> np.ndarray:
    """Per-item, per-channel mean of -p*ln(p), p = sigmoid(f); f64 scores in nats."""
    if f.ndim != 4:
        raise ShapeError(f"expected BCHW features, got shape {f.shape}")
    d = np.asarray(f.data, dtype=np.float64)
    p = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    return (-p * np.log(np.maximum(p, ENTROPY_LOG_EPS))).mean(axis=(2, 3))


def bottom_m_select(scores: np.ndarray, m: int) -> np.ndarray:
    """Indices of the M smallest scores, ties by ascending channel index.

    Accepts (C,) or (B, C); returns sorted index rows of width M.
    """
    scores = np.asarray(scores)
    squeeze = scores.ndim == 1
    rows = scores.reshape(1, -1) if squeeze else scores
    c = rows.shape[1]
    if not 1 <= m <= c:
        raise ConfigError(f"M must be in [1, {c}], got {m}")
    idx = np.broadcast_to(np.arange(c), rows.shape)
    order = np.lexsort((idx, rows), axis=-1)
    selected = np.sort(order[:, :m], axis=1)
    return selected[0] if squeeze else selected


def gather_channels(x: Tensor, indices: np.ndarray) -> Tensor:
    """Differentiable per-item channel gather: out[b, j] = x[b, indices[b, j]]."""
    b = x.shape[0]
    rows = np.arange(b)[:, None]
    out = _node(x.data[rows, indices], (x,), "gather_channels")
    if out.requires_grad:
        def _bw(g):
            buf = np.zeros_like(x.data)
            for bi in range(b):
                buf[bi, indices[bi]] = g[bi]
            x._accum(buf)
        out._backward = _bw
    return out


def efs_spatial_attention(f: Tensor, m: int, proj_weight: Tensor,
                          proj_bias: Optional[Tensor] = None,
                          indices: Optional[np.ndarray] = None,
                          capture: Optional[dict] = None) -> Tensor:
    """Gate all channels of f by sigmoid(1x1 conv over its Bottom-M channels)."""
    if f.ndim != 4:
        raise ShapeError(f"expected BCHW features, got shape {f.shape}")
    c = f.shape[1]
    if not 1 <= m <= c:
        raise ConfigError(f"M must be in [1, {c}], got {m}")
    if proj_weight.shape != (1, m):
        raise ConfigError(f"projection weight must be (1, {m}), "
                          f"got {proj_weight.shape}")
    if indices is None:
        indices = bottom_m_select(channel_entropy(f), m)
    elif indices.shape != (f.shape[0], m):
        raise ConfigError(f"frozen indices must have shape ({f.shape[0]}, {m})")
    gate = sigmoid(conv2d_1x1(gather_channels(f, indices), proj_weight, proj_bias))
    if capture is not None:
        capture["indices"] = indices
        capture["attention"] = gate.numpy()
    return mul(f, gate)
