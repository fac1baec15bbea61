"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError
from .tensor import Parameter, Tensor, no_grad

REL_DENOM_FLOOR = 1e-8


def _as_tensor(p) -> Tensor:
    return p.value if isinstance(p, Parameter) else p


def _default_eps(dtype) -> float:
    return 1e-6 if np.dtype(dtype) == np.float64 else 1e-3


def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_DENOM_FLOOR)


def grad_check(f: Callable[[], Tensor], params: Sequence, eps: Optional[float] = None,
               mode: str = "elementwise", seed: int = 0,
               max_elems: Optional[int] = None) -> dict:
    """Compare reverse-mode gradients of f against central finite differences.

    f must rebuild its graph on every call and read the current parameter data.
    "elementwise" probes individual coordinates (optionally only the max_elems
    largest-gradient ones); "directional" probes one random unit direction per
    parameter against the projected analytic gradient.  Returns a report with
    per-parameter and overall max relative error, denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    tensors = [_as_tensor(p) for p in params]
    names = [p.name if isinstance(p, Parameter) else f"param{i}"
             for i, p in enumerate(params)]
    for t in tensors:
        t.grad = None
    loss = f()
    if loss.size != 1:
        raise ShapeError(f"grad_check needs a scalar loss, got shape {loss.shape}")
    loss.backward()
    grads = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
             for t in tensors]
    if eps is None:
        eps = _default_eps(tensors[0].dtype if tensors else np.float64)
    rng = np.random.default_rng(seed)

    def eval_loss() -> float:
        with no_grad():
            value = float(f().item())
        if not np.isfinite(value):
            raise NumericError("non-finite loss during finite-difference probing")
        return value

    per_param = {}
    for t, g, name in zip(tensors, grads, names):
        base = t.data.copy()
        if mode == "directional":
            v = rng.standard_normal(t.shape)
            norm = float(np.linalg.norm(v))
            v = (v / norm).astype(base.dtype) if norm > 0 else np.asarray(v, base.dtype)
            t.data = base + eps * v
            f_plus = eval_loss()
            t.data = base - eps * v
            f_minus = eval_loss()
            t.data = base
            numeric = (f_plus - f_minus) / (2.0 * eps)
            analytic = float((g * v).sum())
            per_param[name] = _rel_err(analytic, numeric)
        elif mode == "elementwise":
            flat = g.ravel()
            if max_elems is None or max_elems >= flat.size:
                indices = np.arange(flat.size)
            else:
                indices = np.argsort(-np.abs(flat), kind="stable")[:max_elems]
            worst = 0.0
            for idx in indices:
                loc = np.unravel_index(int(idx), t.shape)
                t.data = base.copy()
                t.data[loc] += eps
                f_plus = eval_loss()
                t.data = base.copy()
                t.data[loc] -= eps
                f_minus = eval_loss()
                numeric = (f_plus - f_minus) / (2.0 * eps)
                worst = max(worst, _rel_err(float(flat[idx]), numeric))
            t.data = base
            per_param[name] = worst
        else:
            t.data = base
            raise ValueError(f"mode must be 'elementwise' or 'directional', got {mode!r}")
    return {
        "mode": mode,
        "eps": eps,
        "loss": float(loss.item()),
        "per_param": per_param,
        "max_rel_err": max(per_param.values()) if per_param else 0.0,
    }
