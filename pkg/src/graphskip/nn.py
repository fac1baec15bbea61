"""Neural-net primitives built on the tensor engine.

All ops are differentiable via custom backward closures.  Convolutions are
deliberately narrow: 1x1 pointwise, 3x3 (the only spatial kernel the
architecture and the Sobel filter need), and single-channel 1D.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import ConfigError, DegenerateBatchError, ShapeError
from .tensor import Tensor, _node

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def kaiming_uniform(rng, shape, fan_in: int, dtype) -> np.ndarray:
    """He-uniform draw U(-b, b) with b = sqrt(6 / fan_in) (ReLU gain)."""
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def conv2d_1x1(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Pointwise conv: out[b,o,h,w] = sum_c weight[o,c]*x[b,c,h,w] (+ bias[o])."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d_1x1 expects BCHW input, got shape {x.shape}")
    b, c, h, w = x.shape
    if weight.ndim != 2 or weight.shape[1] != c:
        raise ShapeError(f"weight {weight.shape} incompatible with {c} input channels")
    c_out = weight.shape[0]
    xr = x.data.reshape(b, c, h * w)
    out_data = np.matmul(weight.data, xr).reshape(b, c_out, h, w)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, c_out, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _node(out_data, parents, "conv2d_1x1")
    if out.requires_grad:
        def _bw(g):
            gr = g.reshape(b, c_out, h * w)
            if x.requires_grad:
                x._accum(np.matmul(weight.data.T, gr).reshape(b, c, h, w))
            if weight.requires_grad:
                weight._accum(np.matmul(gr, xr.transpose(0, 2, 1)).sum(axis=0))
            if bias is not None and bias.requires_grad:
                bias._accum(g.sum(axis=(0, 2, 3)))
        out._backward = _bw
    return out


def conv2d_3x3(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
               stride: int = 1) -> Tensor:
    """3x3 conv, zero padding 1, stride 1 or 2."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d_3x3 expects BCHW input, got shape {x.shape}")
    b, c, h, w = x.shape
    if weight.shape[1:] != (c, 3, 3):
        raise ShapeError(f"weight {weight.shape} incompatible with {c} input channels")
    if stride not in (1, 2):
        raise ConfigError(f"stride must be 1 or 2, got {stride}")
    c_out = weight.shape[0]
    ho = (h + 2 - 3) // stride + 1
    wo = (w + 2 - 3) // stride + 1
    padded = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
    padded[:, :, 1:h + 1, 1:w + 1] = x.data
    cols = np.empty((b, c, 9, ho * wo), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            patch = padded[:, :, ki:ki + stride * (ho - 1) + 1:stride,
                           kj:kj + stride * (wo - 1) + 1:stride]
            cols[:, :, ki * 3 + kj, :] = patch.reshape(b, c, ho * wo)
    cols = cols.reshape(b, c * 9, ho * wo)
    w2d = weight.data.reshape(c_out, c * 9)
    out_data = np.matmul(w2d, cols).reshape(b, c_out, ho, wo)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, c_out, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _node(out_data, parents, "conv2d_3x3")
    if out.requires_grad:
        def _bw(g):
            gr = g.reshape(b, c_out, ho * wo)
            if weight.requires_grad:
                gw = np.matmul(gr, cols.transpose(0, 2, 1)).sum(axis=0)
                weight._accum(gw.reshape(c_out, c, 3, 3))
            if bias is not None and bias.requires_grad:
                bias._accum(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gcols = np.matmul(w2d.T, gr).reshape(b, c, 9, ho, wo)
                gpad = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
                for ki in range(3):
                    for kj in range(3):
                        gpad[:, :, ki:ki + stride * (ho - 1) + 1:stride,
                             kj:kj + stride * (wo - 1) + 1:stride] += gcols[:, :, ki * 3 + kj]
                x._accum(gpad[:, :, 1:h + 1, 1:w + 1])
        out._backward = _bw
    return out


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Single-channel 1D conv with odd kernel width and same-length zero padding."""
    if x.ndim != 3 or x.shape[1] != 1:
        raise ShapeError(f"conv1d expects (B,1,L) input, got shape {x.shape}")
    if weight.ndim != 3 or weight.shape[:2] != (1, 1):
        raise ShapeError(f"conv1d expects (1,1,k) weight, got shape {weight.shape}")
    k = weight.shape[2]
    if k % 2 == 0:
        raise ConfigError(f"conv1d kernel width must be odd, got {k}")
    b, _, length = x.shape
    pad = (k - 1) // 2
    xpad = np.zeros((b, 1, length + 2 * pad), dtype=x.dtype)
    xpad[:, :, pad:pad + length] = x.data
    wv = weight.data.reshape(k)
    out_data = np.zeros((b, 1, length), dtype=x.dtype)
    for t in range(k):
        out_data += wv[t] * xpad[:, :, t:t + length]
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _node(out_data, parents, "conv1d")
    if out.requires_grad:
        def _bw(g):
            if weight.requires_grad:
                gw = np.array([(g * xpad[:, :, t:t + length]).sum() for t in range(k)],
                              dtype=x.dtype)
                weight._accum(gw.reshape(1, 1, k))
            if bias is not None and bias.requires_grad:
                bias._accum(np.asarray([g.sum()], dtype=x.dtype).reshape(1))
            if x.requires_grad:
                gpad = np.zeros_like(xpad)
                for t in range(k):
                    gpad[:, :, t:t + length] += wv[t] * g
                x._accum(gpad[:, :, pad:pad + length])
        out._backward = _bw
    return out


class BatchNormState:
    """Running statistics carried between train and eval mode."""

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def copy(self) -> "BatchNormState":
        s = BatchNormState(len(self.running_mean), self.running_mean.dtype)
        s.running_mean = self.running_mean.copy()
        s.running_var = self.running_var.copy()
        return s


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              mode: str = "train", update_running: bool = True) -> Tensor:
    """Per-channel batch normalization over (B,H,W) with affine transform.

    Train mode normalizes by biased batch statistics (eps 1e-5) and updates the
    running stats with momentum 0.1 (running variance stored unbiased).  Eval
    mode normalizes by the running stats.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects BCHW input, got shape {x.shape}")
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    n = b * h * w
    if mode == "train":
        if n < 2:
            raise DegenerateBatchError(f"batch statistics need B*H*W >= 2, got {n}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_running:
            m = BN_MOMENTUM
            state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(
                state.running_mean.dtype)
            state.running_var = ((1 - m) * state.running_var
                                 + m * var * n / (n - 1)).astype(state.running_var.dtype)
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    ivar = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * ivar.reshape(1, c, 1, 1)
    out_data = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    out = _node(out_data, (x, gamma, beta), "batchnorm")
    if out.requires_grad:
        def _bw(g):
            if gamma.requires_grad:
                gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta._accum(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gxhat = g * gamma.data.reshape(1, c, 1, 1)
                iv = ivar.reshape(1, c, 1, 1)
                if mode == "train":
                    # gradient through the batch statistics themselves
                    s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
                    s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                    x._accum(iv / n * (n * gxhat - s1 - xhat * s2))
                else:
                    x._accum(gxhat * iv)
        out._backward = _bw
    return out


_interp_cache: dict = {}


def _interp_matrix(src: int, dst: int, dtype) -> np.ndarray:
    """1D bilinear sampling matrix, half-pixel centers, edges clamped."""
    key = (src, dst, np.dtype(dtype).str)
    cached = _interp_cache.get(key)
    if cached is not None:
        return cached
    mat = np.zeros((dst, src), dtype=dtype)
    scale = src / dst
    for i in range(dst):
        center = (i + 0.5) * scale - 0.5
        center = min(max(center, 0.0), src - 1.0)
        lo = int(np.floor(center))
        hi = min(lo + 1, src - 1)
        t = center - lo
        mat[i, lo] += 1.0 - t
        mat[i, hi] += t
    _interp_cache[key] = mat
    return mat


def bilinear_resize(x: Tensor, target: tuple) -> Tensor:
    """Bilinear resample to (H_t, W_t); identical target returns the input as is."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects BCHW input, got shape {x.shape}")
    ht, wt = int(target[0]), int(target[1])
    if ht < 1 or wt < 1:
        raise ShapeError(f"target extents must be >= 1, got {(ht, wt)}")
    b, c, h, w = x.shape
    if (ht, wt) == (h, w):
        return x
    rows = _interp_matrix(h, ht, x.dtype)
    cols = _interp_matrix(w, wt, x.dtype)
    out_data = np.matmul(np.matmul(rows, x.data), cols.T)
    out = _node(out_data, (x,), "bilinear_resize")
    if out.requires_grad:
        out._backward = lambda g: x._accum(np.matmul(np.matmul(rows.T, g), cols))
    return out


def pool_global(x: Tensor, kind: str, axis: int, keepdims: bool = False) -> Tensor:
    """Reduce one axis to its mean or max (max ties break at the first index)."""
    if x.shape[axis] == 0:
        raise ShapeError("cannot pool over an empty axis")
    from .tensor import reduce_max, tmean
    if kind == "avg":
        return tmean(x, axis=axis, keepdims=keepdims)
    if kind == "max":
        return reduce_max(x, axis=axis, keepdims=keepdims)
    raise ConfigError(f"kind must be 'avg' or 'max', got {kind!r}")
