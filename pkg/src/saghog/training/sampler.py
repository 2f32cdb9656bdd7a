"""P x K batch sampling for metric learning."""

from __future__ import annotations

import logging
import math

import numpy as np

logger = logging.getLogger(__name__)


def pk_sampler(
    labels: np.ndarray,
    P: int = 64,
    K: int = 16,
    rng: np.random.Generator | None = None,
    n_batches: int | None = None,
) -> list[np.ndarray]:
    """One epoch of batches, each with ``P`` distinct classes x ``K`` samples.

    Classes are visited in shuffled order so every class appears at least
    once per epoch; by default the epoch also has enough batches to touch
    roughly every sample once. Classes with fewer than ``K`` samples
    contribute all of them plus random repeats.
    """
    rng = rng or np.random.default_rng()
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < P:
        logger.warning("only %d classes available; reducing P from %d", len(classes), P)
        P = len(classes)
    if P < 1:
        return []
    members = {c: np.flatnonzero(labels == c) for c in classes}
    if n_batches is None:
        n_batches = max(math.ceil(len(classes) / P), math.ceil(len(labels) / (P * K)))

    order: list = []
    while len(order) < n_batches * P:
        order.extend(rng.permutation(classes).tolist())
    batches = []
    for b in range(n_batches):
        chosen = order[b * P:(b + 1) * P]
        if len(set(chosen)) < P:
            # a reshuffle boundary produced a duplicate; swap in unused classes
            seen, fixed = set(), []
            spare = [c for c in rng.permutation(classes).tolist() if c not in chosen]
            for c in chosen:
                if c in seen:
                    c = spare.pop()
                seen.add(c)
                fixed.append(c)
            chosen = fixed
        idx = []
        for c in chosen:
            m = members[c]
            if len(m) >= K:
                idx.append(rng.choice(m, K, replace=False))
            else:
                idx.append(np.concatenate([rng.permutation(m), rng.choice(m, K - len(m), replace=True)]))
        batches.append(np.concatenate(idx))
    return batches
