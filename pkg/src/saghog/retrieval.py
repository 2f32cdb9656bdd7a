"""Page descriptors, PCA whitening, leave-one-out ranking and mAP / Top-1."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .features import read_descriptors, write_descriptors

logger = logging.getLogger(__name__)

POWER_ALPHA = 0.4


def _l2n(x: np.ndarray, axis: int = -1) -> np.ndarray:
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def power_normalize(x: np.ndarray, alpha: float = POWER_ALPHA) -> np.ndarray:
    """``sign(x) * |x| ** alpha``; zero stays zero."""
    return np.sign(x) * np.abs(x) ** alpha


def aggregate_page(encodings: np.ndarray, alpha: float = POWER_ALPHA) -> np.ndarray:
    """l2-normalize each encoding, sum-pool, power-normalize, l2-normalize."""
    enc = np.asarray(encodings, dtype=np.float64)
    if enc.ndim != 2 or enc.shape[0] == 0:
        raise ValueError("need at least one encoding to aggregate")
    pooled = _l2n(enc).sum(axis=0)
    return _l2n(power_normalize(pooled, alpha))


@dataclass(frozen=True)
class WhiteningModel:
    mean: np.ndarray
    projection: np.ndarray  # (d, D_src), rows sorted by descending eigenvalue
    eigenvalues: np.ndarray
    eps: float = 1e-8

    @property
    def dim(self) -> int:
        return self.projection.shape[0]


def fit_whitening(train: np.ndarray, dim: int = 512, eps: float = 1e-8) -> WhiteningModel:
    """PCA whitening fitted on training descriptors only.

    Uses the thin SVD of the centred data, so it is cheap when
    ``n_train << D_src``. ``dim`` is reduced to the numerical rank (with a
    warning) if the covariance cannot support it.
    """
    x = np.asarray(train, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError("whitening needs at least two training descriptors")
    mu = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mu, full_matrices=False)
    lam = s**2 / (n - 1)
    rank = int(np.sum(lam > max(lam[0], 1e-300) * 1e-10)) if lam.size else 0
    if dim > rank:
        logger.warning("whitening dimension %d reduced to numerical rank %d", dim, rank)
        dim = rank
    lam = lam[:dim]
    proj = vt[:dim] / np.sqrt(lam + eps)[:, None]
    return WhiteningModel(mean=mu, projection=proj, eigenvalues=lam, eps=eps)


def apply_whitening(model: WhiteningModel, x: np.ndarray, normalize: bool = True) -> np.ndarray:
    y = (np.asarray(x, dtype=np.float64) - model.mean) @ model.projection.T
    return _l2n(y) if normalize else y


@dataclass
class RankedList:
    query: str
    ids: list[str]
    scores: np.ndarray


def rank_all(descriptors: np.ndarray, ids: Sequence[str]) -> list[RankedList]:
    """Leave-one-out ranking by cosine similarity.

    Descriptors are assumed unit-norm (cosine = dot product). Ties are broken
    by ascending gallery id.
    """
    x = np.asarray(descriptors, dtype=np.float64)
    ids = list(ids)
    if x.shape[0] < 2:
        raise ValueError("need at least two descriptors to rank")
    sims = x @ x.T
    id_rank = np.empty(len(ids), dtype=int)
    id_rank[np.argsort(np.array(ids, dtype=object), kind="stable")] = np.arange(len(ids))
    out = []
    for q in range(len(ids)):
        others = np.delete(np.arange(len(ids)), q)
        s = sims[q, others]
        order = others[np.lexsort((id_rank[others], -s))]
        out.append(RankedList(ids[q], [ids[i] for i in order], sims[q, order]))
    return out


def average_precision(hits: np.ndarray) -> float:
    """Mean precision at the ranks of relevant items, summed exactly and rounded once."""
    hits = np.asarray(hits, dtype=bool)
    if not hits.any():
        return float("nan")
    ranks = np.flatnonzero(hits) + 1
    total = sum(Fraction(k, int(r)) for k, r in enumerate(ranks, start=1))
    return float(total / len(ranks))


def evaluate(ranked: Sequence[RankedList], labels: Mapping[str, str], task: str = "writer") -> dict:
    """mAP and Top-1 over queries; relevance means equal ``labels`` value.

    For the writer task ``labels`` maps ids to writers, for the page task to
    source pages. Queries without any relevant gallery item are excluded and
    counted.
    """
    aps, top1, excluded = [], [], 0
    for r in ranked:
        for key in [r.query, *r.ids]:
            if key not in labels:
                raise KeyError(f"label table has no entry for {key!r}")
        q = labels[r.query]
        hits = np.array([labels[g] == q for g in r.ids], dtype=bool)
        if not hits.any():
            excluded += 1
            continue
        aps.append(average_precision(hits))
        top1.append(bool(hits[0]))
    n = len(aps)
    return {
        "task": task,
        "map": float(np.mean(aps)) if n else 0.0,
        "top1": float(np.mean(top1)) if n else 0.0,
        "n_queries": n,
        "excluded_queries": excluded,
    }


def evaluate_descriptors(x: np.ndarray, ids: Sequence[str], labels: Mapping[str, str], task: str = "writer") -> dict:
    return evaluate(rank_all(x, ids), labels, task)


# ---------------------------------------------------------------------------
# descriptor store


def write_store(path: str | Path, ids: Sequence[str], x: np.ndarray, extra: Sequence[dict] | None = None) -> None:
    """``SGHD`` matrix plus a JSON-lines id index next to it (``.jsonl``)."""
    path = Path(path)
    write_descriptors(path, x)
    lines = []
    for i, pid in enumerate(ids):
        rec = {"index": i, "page_id": pid}
        if extra is not None:
            rec.update(extra[i])
        lines.append(json.dumps(rec, sort_keys=True))
    path.with_suffix(".jsonl").write_text("\n".join(lines) + "\n")


def read_store(path: str | Path) -> tuple[list[dict], np.ndarray]:
    path = Path(path)
    x = read_descriptors(path)
    recs = [json.loads(l) for l in path.with_suffix(".jsonl").read_text().splitlines() if l.strip()]
    if len(recs) != x.shape[0]:
        raise ValueError(f"{path}: index has {len(recs)} rows but store has {x.shape[0]}")
    return recs, x
