"""k-means (k-means++ seeding) and ratio-test pseudo-labels for Cl-S finetuning."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    inertia: float
    history: list[float] = field(default_factory=list)
    n_iter: int = 0


def _sq_dists(x: np.ndarray, c: np.ndarray, chunk: int = 4096) -> np.ndarray:
    cn = (c * c).sum(1)
    out = np.empty((x.shape[0], c.shape[0]))
    for lo in range(0, x.shape[0], chunk):
        xb = x[lo:lo + chunk]
        d = (xb * xb).sum(1)[:, None] - 2.0 * xb @ c.T + cn[None, :]
        out[lo:lo + chunk] = np.maximum(d, 0.0)
    return out


def kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[j] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[j:j + 1])[:, 0])
    return centers


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-4) -> KMeansResult:
    """Lloyd iterations until ``max_iter`` or relative inertia change below ``tol``.

    ``history`` records the inertia after each assignment step; it is
    non-increasing. Empty clusters are re-seeded at the worst-fit point.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < k:
        raise ValueError(f"need at least k={k} points, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    centers = kmeans_pp(x, k, rng)
    history: list[float] = []
    labels = np.zeros(x.shape[0], dtype=int)
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centers)
        labels = d.argmin(1)
        best = d[np.arange(len(x)), labels]
        inertia = float(best.sum())
        history.append(inertia)
        if len(history) > 1:
            prev = history[-2]
            if prev == 0 or (prev - inertia) / prev < tol:
                break
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            far = int(best.argmax())
            centers[j] = x[far]
            best[far] = 0.0
    return KMeansResult(centers=centers, labels=labels, inertia=history[-1], history=history, n_iter=it)


@dataclass
class PseudoLabels:
    patch_ids: list[str]
    assignments: np.ndarray
    kept: np.ndarray
    k: int
    centers: np.ndarray | None = None

    def to_jsonl(self, path: str | Path) -> None:
        lines = [
            json.dumps({"patch_id": pid, "cluster": int(c), "kept": bool(kp)}, sort_keys=True)
            for pid, c, kp in zip(self.patch_ids, self.assignments, self.kept)
        ]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "PseudoLabels":
        recs = [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]
        assign = np.array([r["cluster"] for r in recs], dtype=int)
        return cls(
            patch_ids=[r["patch_id"] for r in recs],
            assignments=assign,
            kept=np.array([r["kept"] for r in recs], dtype=bool),
            k=int(assign.max()) + 1 if len(assign) else 0,
        )


def ratio_test(x: np.ndarray, centers: np.ndarray, threshold: float = 0.9) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centre assignment and whether ``d1 / d2 < threshold``."""
    d = np.sqrt(_sq_dists(np.asarray(x, dtype=np.float64), centers))
    if centers.shape[0] < 2:
        return d.argmin(1), np.ones(len(x), dtype=bool)
    part = np.partition(d, 1, axis=1)
    d1, d2 = part[:, 0], part[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(d2 > 0, d1 / d2, 1.0)
    return d.argmin(1), ratio < threshold


def cluster_pseudolabels(
    descriptors: np.ndarray,
    k: int,
    seed: int = 0,
    patch_ids: Sequence[str] | None = None,
    ratio: float = 0.9,
    max_iter: int = 100,
    tol: float = 1e-4,
) -> PseudoLabels:
    x = np.asarray(descriptors, dtype=np.float64)
    distinct = len(np.unique(x, axis=0))
    if distinct < k:
        logger.warning("only %d distinct descriptors; reducing k from %d to %d", distinct, k, distinct)
        k = distinct
    res = kmeans(x, k, seed=seed, max_iter=max_iter, tol=tol)
    assign, kept = ratio_test(x, res.centers, ratio)
    ids = list(patch_ids) if patch_ids is not None else [str(i) for i in range(len(x))]
    return PseudoLabels(patch_ids=ids, assignments=assign, kept=kept, k=k, centers=res.centers)
