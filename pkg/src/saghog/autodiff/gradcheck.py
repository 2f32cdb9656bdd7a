"""Central finite-difference gradient verification (float64)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5, coords: np.ndarray | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``t`` at the given flat ``coords``."""
    flat = t.data.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)
    out = np.zeros(len(idx))
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        out[j] = (fp - fm) / (2 * h)
    return out


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    n_points: int = 10,
    h: float = 1e-5,
    rng: np.random.Generator | None = None,
    atol: float = 1e-8,
) -> float:
    """Max relative error between analytic and numeric gradients.

    ``n_points`` coordinates are sampled per input. Relative error is
    ``|a - n| / max(|a|, |n|, 1e-6)``; the floor keeps near-zero gradients
    from dominating. Coordinates with ``|a - n| <= atol`` count as exact:
    structurally zero gradients (e.g. the key bias under softmax) otherwise
    report pure finite-difference roundoff.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError("gradient checks require float64 tensors")
        t.grad = None
    out = fn()
    out.backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        size = t.data.size
        coords = rng.choice(size, size=min(n_points, size), replace=False)
        num = numeric_grad(fn, t, h, coords)
        ana = analytic.reshape(-1)[coords]
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-6)
        err = np.where(np.abs(ana - num) <= atol, 0.0, np.abs(ana - num) / denom)
        worst = max(worst, float(np.max(err)))
    return worst
