"""End-to-end glue between the manifest, the training loops and retrieval."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Sequence

import numpy as np

from .config import PipelineConfig
from .curation import Manifest
from .features import PatchBatch, sift_descriptors
from .model import WriterNet
from .retrieval import WhiteningModel, apply_whitening, fit_whitening
from .training import EvalPages, PseudoLabels, cluster_pseudolabels, page_descriptors
from .imaging import to_gray
from .training.data import PageRef, binarize_page, extract_patches, load_page, patches_at
from .training.finetune import labels_from_strings

logger = logging.getLogger(__name__)


def page_refs(manifest: Manifest, split: str | None = None) -> list[PageRef]:
    return [PageRef(r.page_id, r.writer_id, r.path, r.mask_path) for r in manifest.admitted(split)]


def _extract_job(args) -> PatchBatch:
    ref, cfg, limit, seed, idx = args
    rng = None if seed is None else np.random.default_rng([seed, idx])
    return extract_patches(load_page(ref), cfg, limit, rng=rng, page_id=ref.page_id)


def page_patches(
    refs: Sequence[PageRef], cfg: PipelineConfig, limit: int, seed: int | None = None, workers: int = 1
) -> list[PatchBatch]:
    """One patch set per full page (random keypoint order iff ``seed`` is given)."""
    jobs = [(r, cfg, limit, seed, i) for i, r in enumerate(refs)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            return list(ex.map(_extract_job, jobs))
    return [_extract_job(j) for j in jobs]


def eval_pages(refs: Sequence[PageRef], cfg: PipelineConfig, workers: int = 1) -> EvalPages:
    sets = page_patches(refs, cfg, cfg.encode_patches_per_page, workers=workers)
    empty = [r.page_id for r, b in zip(refs, sets) if len(b) == 0]
    if empty:
        raise ValueError(f"pages without usable patches: {', '.join(empty[:5])}")
    return EvalPages([r.page_id for r in refs], [r.writer_id for r in refs], [b.patches for b in sets])


def supervised_set(refs: Sequence[PageRef], cfg: PipelineConfig, workers: int = 1) -> tuple[PatchBatch, np.ndarray]:
    batch = PatchBatch.concat(page_patches(refs, cfg, cfg.finetune_patches_per_page, seed=cfg.seed, workers=workers))
    writer_of = {r.page_id: r.writer_id for r in refs}
    labels, _ = labels_from_strings([writer_of[p] for p, _ in batch.provenance])
    return batch, labels


# ---------------------------------------------------------------------------
# Cl-S pseudo-labels


def _cluster_job(args) -> tuple[PatchBatch, np.ndarray]:
    ref, cfg, idx = args
    img = load_page(ref)
    rng = np.random.default_rng([cfg.seed, 4, idx])
    batch = extract_patches(img, cfg, cfg.cluster_patches_per_page, rng=rng, page_id=ref.page_id)
    if len(batch) == 0:
        return batch, np.zeros((0, 128))
    binary = binarize_page(to_gray(img), cfg)
    desc, ok = sift_descriptors(binary, batch.keypoints)
    return batch.select(np.flatnonzero(ok)), desc[ok]


def cluster_pages(refs: Sequence[PageRef], cfg: PipelineConfig, workers: int = 1) -> PseudoLabels:
    """SIFT descriptors (binarized page) of sampled patches, clustered with k-means."""
    jobs = [(r, cfg, i) for i, r in enumerate(refs)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_cluster_job, jobs))
    else:
        parts = [_cluster_job(j) for j in jobs]
    batch = PatchBatch.concat([b for b, _ in parts])
    desc = np.concatenate([d for _, d in parts]) if parts else np.zeros((0, 128))
    if len(desc) < 2:
        raise ValueError("too few descriptors to cluster")
    ids = [f"{p}#{k}" for p, k in batch.provenance]
    return cluster_pseudolabels(desc, cfg.cluster_k, seed=cfg.seed, patch_ids=ids, ratio=cfg.ratio_test,
                                max_iter=cfg.kmeans_max_iter, tol=cfg.kmeans_tol)


def pseudo_label_set(refs: Sequence[PageRef], labels: PseudoLabels, cfg: PipelineConfig) -> tuple[PatchBatch, np.ndarray]:
    """Re-cut the kept patches listed in a pseudo-label file."""
    wanted: dict[str, dict[int, int]] = {}
    for pid, cluster, kept in zip(labels.patch_ids, labels.assignments, labels.kept):
        if not kept:
            continue
        page, kp = pid.rsplit("#", 1)
        wanted.setdefault(page, {})[int(kp)] = int(cluster)
    parts, labs = [], []
    for ref in refs:
        if ref.page_id not in wanted:
            continue
        want = wanted[ref.page_id]
        batch, _ = patches_at(load_page(ref), cfg, sorted(want), ref.page_id)
        parts.append(batch)
        labs.append(np.array([want[k] for _, k in batch.provenance], dtype=int))
    if not parts:
        raise ValueError("no kept pseudo-labelled patch belongs to the given pages")
    return PatchBatch.concat(parts), np.concatenate(labs)


# ---------------------------------------------------------------------------
# descriptors


def global_descriptors(
    model: WriterNet,
    pages: EvalPages,
    cfg: PipelineConfig,
    whitening: WhiteningModel | None = None,
) -> np.ndarray:
    x = page_descriptors(model, pages, cfg)
    return apply_whitening(whitening, x) if whitening is not None else x


def fit_page_whitening(model: WriterNet, pages: EvalPages, cfg: PipelineConfig) -> WhiteningModel:
    return fit_whitening(page_descriptors(model, pages, cfg), cfg.pca_dim)
