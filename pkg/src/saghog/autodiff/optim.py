"""AdamW, cosine schedule with linear warmup, gradient clipping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.0
    skipped: int = 0


class AdamW:
    """Adam with decoupled weight decay.

    The decay is applied multiplicatively to the parameter before the moment
    update: ``p *= 1 - lr * wd``, followed by the usual bias-corrected Adam
    step. Parameters listed in ``no_decay`` (by position) are not decayed.
    """

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        no_decay: set[int] | None = None,
    ):
        self.params = list(params)
        self.no_decay = set(no_decay or ())
        self.state = OptimizerState(
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
            lr=lr,
            betas=tuple(betas),
            eps=eps,
            weight_decay=weight_decay,
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> bool:
        """Apply one update; returns False (and changes nothing) on non-finite gradients."""
        st = self.state
        lr = st.lr if lr is None else lr
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            st.skipped += 1
            logger.warning("non-finite gradient at step %d; update skipped", st.step)
            return False
        st.step += 1
        b1, b2 = st.betas
        c1 = 1.0 - b1**st.step
        c2 = 1.0 - b2**st.step
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if st.weight_decay and i not in self.no_decay:
                p.data *= p.data.dtype.type(1.0 - lr * st.weight_decay)
            m, v = st.m[i], st.v[i]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (lr / c1) * m / (np.sqrt(v / c2) + st.eps)
            p.data -= update.astype(p.data.dtype, copy=False)
        return True


def cosine_warmup_lr(step: float, warmup: float, total: float, base_lr: float, min_lr: float = 0.0) -> float:
    """Linear ramp 0 -> ``base_lr`` over ``warmup``, then half-cosine to ``min_lr`` at ``total``.

    ``step`` may be fractional (e.g. epochs with per-iteration resolution).
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    if total <= warmup:
        return base_lr
    t = min(1.0, (step - warmup) / (total - warmup))
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * t))


def global_norm(grads: list[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_gradients(params: list[Tensor], max_norm: float, mode: str = "norm") -> float:
    """Clip gradients in place and return the pre-clipping global norm.

    ``mode="norm"`` rescales all gradients by ``max_norm / g`` when the global
    l2 norm ``g`` exceeds ``max_norm``; ``mode="value"`` clamps elementwise.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    grads = [p.grad for p in params if p.grad is not None]
    norm = global_norm(grads)
    if mode == "value":
        for g in grads:
            np.clip(g, -max_norm, max_norm, out=g)
    elif mode == "norm":
        if norm > max_norm:
            scale = max_norm / norm
            for g in grads:
                g *= g.dtype.type(scale)
    else:
        raise ValueError(f"unknown clipping mode {mode!r}")
    return norm


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append(row)

    def to_csv(self, path) -> None:
        cols = ["epoch", "split", "loss", "map", "lr"]
        lines = [",".join(cols)]
        for r in self.rows:
            lines.append(",".join("" if r.get(c) is None else _fmt(r[c]) for c in cols))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
