"""Adam with bias correction, updating parameters in place."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .engine import NonFiniteError, Tensor


class Adam:
    def __init__(self, params: Sequence[Tensor], betas=(0.5, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        """One update from the ``.grad`` of every parameter (missing grads count as zero)."""
        for i, p in enumerate(self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient for parameter {i} {p.shape}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            g = g.astype(p.dtype, copy=False)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / c1
            vhat = v / c2
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}t": np.array(self.t, dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}m.{i}"] = m
            out[f"{prefix}v.{i}"] = v
        return out

    def load_state(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        self.t = int(state[f"{prefix}t"])
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            src_m, src_v = state[f"{prefix}m.{i}"], state[f"{prefix}v.{i}"]
            if src_m.shape != m.shape or src_v.shape != v.shape:
                raise ValueError(f"optimizer moment {i} shape mismatch")
            m[...] = src_m
            v[...] = src_v
