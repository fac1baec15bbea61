"""Adam with a closed-form per-epoch cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ManifestError
from .tensor import Parameter


def cosine_lr(epoch: int, total_epochs: int, base_lr: float,
              floor_lr: float) -> float:
    """Anneal from base_lr (epoch 0) to floor_lr (last epoch) on a half cosine."""
    if total_epochs < 1:
        raise ConfigError("schedule needs at least one epoch")
    if not 0 <= epoch < total_epochs:
        raise ConfigError(f"epoch {epoch} outside schedule of {total_epochs}")
    if total_epochs == 1:
        return base_lr
    t = epoch / (total_epochs - 1)
    return floor_lr + 0.5 * (base_lr - floor_lr) * (1.0 + math.cos(math.pi * t))


class Adam:
    """Standard bias-corrected Adam over a fixed parameter list."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0.0 or eps <= 0.0:
            raise ConfigError("lr and eps must be positive")
        if not 0.0 <= betas[0] < 1.0 or not 0.0 <= betas[1] < 1.0:
            raise ConfigError("betas must lie in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> Tuple[List[np.ndarray], dict]:
        meta = {"kind": "adam", "t": self.t, "lr": self.lr,
                "betas": list(self.betas), "eps": self.eps,
                "count": len(self.params)}
        return list(self.m) + list(self.v), meta

    def load_state_arrays(self, arrays: List[np.ndarray], meta: dict) -> None:
        if meta.get("kind") != "adam" or meta.get("count") != len(self.params):
            raise ManifestError("optimizer state does not match this Adam instance")
        if len(arrays) != 2 * len(self.params):
            raise ManifestError(f"expected {2 * len(self.params)} moment arrays, "
                                f"got {len(arrays)}")
        for slot, arr, p in zip(self.m + self.v, arrays,
                                self.params + self.params):
            if arr.shape != p.data.shape:
                raise ManifestError("optimizer moment shape mismatch")
            slot[...] = arr.astype(slot.dtype, copy=False)
        self.t = int(meta["t"])
        self.lr = float(meta["lr"])
        self.betas = (float(meta["betas"][0]), float(meta["betas"][1]))
        self.eps = float(meta["eps"])
