"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(
    f: Callable[[], Tensor],
    t: Tensor,
    eps: float = 1e-5,
    indices: Optional[Iterable[tuple]] = None,
) -> tuple[list[tuple], np.ndarray]:
    """Central differences of scalar ``f()`` w.r.t. entries of ``t`` (in place)."""
    if indices is None:
        indices = list(np.ndindex(t.shape))
    indices = list(indices)
    out = np.empty(len(indices), dtype=np.float64)
    for k, idx in enumerate(indices):
        orig = t.data[idx]
        t.data[idx] = orig + eps
        fp = f().item()
        t.data[idx] = orig - eps
        fm = f().item()
        t.data[idx] = orig
        out[k] = (fp - fm) / (2 * eps)
    return indices, out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> dict[int, float]:
    """Compare backprop against finite differences for each tensor.

    ``f`` must rebuild the graph on every call. When ``max_entries`` is set, a
    random subset of each tensor's entries is probed. Returns the relative
    error per tensor position in ``tensors``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    f().backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
    errors = {}
    for pos, t in enumerate(tensors):
        all_idx = list(np.ndindex(t.shape))
        if max_entries is not None and len(all_idx) > max_entries:
            pick = rng.choice(len(all_idx), size=max_entries, replace=False)
            all_idx = [all_idx[i] for i in sorted(pick)]
        idx, num = numeric_grad(f, t, eps, all_idx)
        ana = np.array([analytic[pos][i] for i in idx])
        errors[pos] = relative_error(ana, num)
    return errors
