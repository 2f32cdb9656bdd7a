"""Masked reconstruction loss and Multi-Similarity loss."""

from __future__ import annotations

import logging

import numpy as np

from ..autodiff import Tensor
from ..autodiff import ops as T
from ..model import MaskPlan

logger = logging.getLogger(__name__)


def mae_loss(pred: Tensor, targets: np.ndarray, plan: MaskPlan) -> Tensor:
    """Mean squared error over masked tokens only.

    ``targets`` holds one vector per token, ``(B, 64, dim)`` (an
    ``(B, 8, 8, dim)`` HOG grid is flattened row-major).
    """
    t = np.asarray(targets)
    if t.ndim == 4:
        t = t.reshape(t.shape[0], -1, t.shape[-1])
    picked = np.take_along_axis(t, plan.masked[..., None], axis=1).astype(pred.dtype)
    if picked.shape != pred.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match masked targets {picked.shape}")
    d = pred - picked
    return (d * d).mean()


def ms_loss(
    emb: Tensor,
    labels: np.ndarray,
    alpha: float = 2.0,
    beta: float = 50.0,
    base: float = 0.5,
    margin: float = 0.1,
) -> Tensor:
    """Multi-Similarity loss on cosine similarities of unit-norm embeddings.

    Mining per anchor keeps negatives with ``s > min_pos - margin`` and
    positives with ``s < max_neg + margin``; anchors left without a kept
    positive or negative contribute zero. The sum over anchors is divided by
    the batch size. Self-pairs are excluded by index.
    """
    labels = np.asarray(labels)
    b = labels.shape[0]
    sims = T.matmul(emb, emb.T)
    s = sims.data
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(b, dtype=bool)
    neg = ~same
    if not neg.any():
        logger.warning("multi-similarity loss on a single-class batch is zero")
        return T.mul(sims.sum(), 0.0)
    inf = np.inf
    min_pos = np.where(pos, s, inf).min(axis=1, keepdims=True)
    max_neg = np.where(neg, s, -inf).max(axis=1, keepdims=True)
    neg_keep = neg & (s + margin > min_pos)
    pos_keep = pos & (s - margin < max_neg)
    valid = neg_keep.any(axis=1) & pos_keep.any(axis=1)
    if not valid.any():
        return T.mul(sims.sum(), 0.0)
    dt = emb.dtype
    pos_w = np.where(pos_keep & valid[:, None], 1.0, 0.0).astype(dt)
    neg_w = np.where(neg_keep & valid[:, None], 1.0, 0.0).astype(dt)
    pos_sum = (T.exp((sims - base) * (-alpha)) * pos_w).sum(axis=1)
    neg_sum = (T.exp((sims - base) * beta) * neg_w).sum(axis=1)
    per_anchor = T.log(pos_sum + 1.0) * (1.0 / alpha) + T.log(neg_sum + 1.0) * (1.0 / beta)
    # invalid anchors have zero sums, hence log(1) = 0
    return per_anchor.sum() * (1.0 / b)
