"""Metric-learning finetuning of encoder + NetRVLAD with early stopping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..autodiff import TrainLog, clip_gradients, cosine_warmup_lr, no_grad
from ..config import PipelineConfig
from ..features import PatchBatch
from ..model import WriterNet, to_input, token_dropout_mask
from ..retrieval import aggregate_page, evaluate_descriptors
from .data import augment_morphology, as_uint8_view
from .losses import ms_loss
from .pretrain import make_optimizer
from .sampler import pk_sampler

logger = logging.getLogger(__name__)


class EarlyStopping:
    """Stop once ``patience`` consecutive epochs fail to improve the best metric."""

    def __init__(self, patience: int = 5):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.bad_epochs = 0
        self.epoch = 0

    def update(self, metric: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        self.epoch += 1
        if metric > self.best:
            self.best, self.best_epoch, self.bad_epochs = metric, self.epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class EvalPages:
    """Per-page patch sets with their writer labels, for validation or test."""

    page_ids: list[str]
    writers: list[str]
    patches: list[np.ndarray]


def encode_patches(model: WriterNet, patches: np.ndarray, in_chans: int, batch: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for lo in range(0, len(patches), batch):
            x = to_input(as_uint8_view(patches[lo:lo + batch]), in_chans)
            out.append(model(x).data)
    return np.concatenate(out) if out else np.zeros((0, model.out_dim), np.float32)


def page_descriptors(model: WriterNet, pages: EvalPages, cfg: PipelineConfig) -> np.ndarray:
    """One aggregated (un-whitened) descriptor per page."""
    rows = []
    for p in pages.patches:
        if len(p) == 0:
            raise ValueError("a page without patches cannot be encoded")
        rows.append(aggregate_page(encode_patches(model, p, cfg.in_chans), cfg.power_alpha))
    return np.stack(rows)


def validation_map(model: WriterNet, pages: EvalPages, cfg: PipelineConfig) -> float:
    x = page_descriptors(model, pages, cfg)
    labels = dict(zip(pages.page_ids, pages.writers))
    return evaluate_descriptors(x, pages.page_ids, labels)["map"]


@dataclass
class FinetuneResult:
    model: WriterNet
    log: TrainLog = field(default_factory=TrainLog)
    val_maps: list[float] = field(default_factory=list)
    train_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def finetune(
    model: WriterNet,
    train: PatchBatch,
    labels: np.ndarray,
    cfg: PipelineConfig,
    val: EvalPages | None = None,
    frozen: bool | None = None,
) -> FinetuneResult:
    """Train with MS loss on P x K batches.

    ``labels`` are writer ids (supervised) or cluster ids (cls); nothing else
    depends on the regime. With ``val`` the epoch with the best validation
    mAP is restored at the end. ``frozen`` keeps the encoder fixed.
    """
    frozen = cfg.freeze_backbone if frozen is None else frozen
    labels = np.asarray(labels)
    if len(labels) != len(train):
        raise ValueError("one label per training patch required")
    if len(np.unique(labels)) < 2:
        raise ValueError("finetuning needs at least two classes")
    model.to(np.float32)
    rng = np.random.default_rng([cfg.seed, 3])
    opt = make_optimizer(model, cfg.finetune_lr, cfg.finetune_weight_decay, "encoder." if frozen else None)
    stopper = EarlyStopping(cfg.patience)
    result = FinetuneResult(model)
    best_state = model.state_dict()
    src = as_uint8_view(train.patches)
    n_tokens = model.cfg.num_tokens
    for epoch in range(cfg.finetune_epochs):
        batches = pk_sampler(labels, cfg.batch_classes, cfg.samples_per_class, rng)
        losses = []
        lr = cfg.finetune_lr
        for s, idx in enumerate(batches):
            lr = cosine_warmup_lr(epoch + s / len(batches), cfg.finetune_warmup, cfg.finetune_epochs, cfg.finetune_lr)
            patches = augment_morphology(src[idx], rng, cfg.p_erode, cfg.p_dilate)
            keep = token_dropout_mask(len(idx), n_tokens, cfg.token_dropout, rng)
            opt.zero_grad()
            emb = model(to_input(patches, cfg.in_chans), keep)
            loss = ms_loss(emb, labels[idx], cfg.ms_alpha, cfg.ms_beta, cfg.ms_base, cfg.ms_margin)
            value = float(loss.item())
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite finetuning loss at epoch {epoch + 1}")
            loss.backward()
            clip_gradients(opt.params, cfg.finetune_clip, cfg.clip_mode)
            opt.step(lr)
            losses.append(value)
        mean = float(np.mean(losses)) if losses else float("nan")
        result.train_losses.append(mean)
        result.log.add(epoch=epoch + 1, split="train", loss=mean, lr=lr)
        if val is None:
            continue
        m = validation_map(model, val, cfg)
        result.val_maps.append(m)
        result.log.add(epoch=epoch + 1, split="val", map=m)
        logger.info("finetune epoch %d loss %.5f val mAP %.4f", epoch + 1, mean, m)
        stop = stopper.update(m)
        if stopper.best_epoch == stopper.epoch:
            best_state = model.state_dict()
        if stop:
            result.stopped_early = True
            break
    if val is not None:
        model.load_state_dict(best_state)
        result.best_epoch = stopper.best_epoch
    else:
        result.best_epoch = len(result.train_losses)
    return result


def labels_from_strings(values: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    """Map string class names to dense integer labels (sorted name order)."""
    names = sorted(set(values))
    index = {n: i for i, n in enumerate(names)}
    return np.array([index[v] for v in values], dtype=int), names
