"""Masked-HOG pretraining of the ViT encoder."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..autodiff import AdamW, Module, TrainLog, clip_gradients, cosine_warmup_lr, save_checkpoint
from ..config import PipelineConfig
from ..features import PatchBatch
from ..imaging import read_mask
from ..model import MaskedAutoencoder, plan_mask, to_input
from .data import PageRef, augment_channels, compute_targets, extract_patches, load_page
from .losses import mae_loss

logger = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    pass


def make_optimizer(model: Module, lr: float, weight_decay: float, frozen_prefix: str | None = None) -> AdamW:
    """AdamW over trainable parameters; biases, norms and embeddings are not decayed."""
    named = [(n, p) for n, p in model.named_parameters() if frozen_prefix is None or not n.startswith(frozen_prefix)]
    no_decay = {
        i for i, (n, p) in enumerate(named)
        if p.data.ndim < 2 or any(k in n for k in ("pos_embed", "cls_token", "mask_token"))
    }
    return AdamW([p for _, p in named], lr=lr, betas=(0.9, 0.95), weight_decay=weight_decay, no_decay=no_decay)


@dataclass
class PretrainResult:
    model: MaskedAutoencoder
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    log: TrainLog = field(default_factory=TrainLog)
    optimizer: AdamW | None = None


def _dump_state(model: Module, opt: AdamW, where: Path | None, meta: dict) -> str | None:
    if where is None:
        return None
    where.mkdir(parents=True, exist_ok=True)
    path = where / "nonfinite_state.sgck"
    save_checkpoint(path, model.state_dict(), {**meta, "kind": "nonfinite_dump"})
    return str(path)


class Pretrainer:
    """Owns model, optimizer and step counter across epochs."""

    def __init__(self, cfg: PipelineConfig, model: MaskedAutoencoder | None = None, dump_dir: Path | None = None):
        self.cfg = cfg
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.model = model or MaskedAutoencoder(cfg.vit(), np.random.default_rng([cfg.seed, 0]))
        self.model.to(np.float32)
        self.opt = make_optimizer(self.model, cfg.pretrain_lr, cfg.pretrain_weight_decay)
        self.dump_dir = dump_dir
        self.result = PretrainResult(self.model, optimizer=self.opt)

    @property
    def batch_size(self) -> int:
        return self.cfg.pretrain_batch_pages * self.cfg.patches_per_page

    def step(self, inputs: np.ndarray, targets: np.ndarray, lr: float) -> float:
        cfg = self.cfg
        plan = plan_mask(self.rng, cfg.mask_ratio, batch=len(inputs))
        x = to_input(inputs, cfg.in_chans)
        self.opt.zero_grad()
        loss = mae_loss(self.model(x, plan), targets, plan)
        value = float(loss.item())
        if not math.isfinite(value):
            dump = _dump_state(self.model, self.opt, self.dump_dir, {"config": cfg.to_dict()})
            raise NonFiniteLoss(f"non-finite pretraining loss {value}; state dumped to {dump}")
        loss.backward()
        clip_gradients(self.opt.params, cfg.pretrain_clip, cfg.clip_mode)
        self.opt.step(lr)
        return value

    def run_epoch(self, epoch: int, batch: PatchBatch, targets: np.ndarray) -> float:
        """One pass over ``batch`` in shuffled order; returns the mean step loss."""
        cfg = self.cfg
        n = len(batch)
        if n == 0:
            raise ValueError("no patches to train on")
        order = self.rng.permutation(n)
        inputs = augment_channels(batch.patches, batch.binary, self.rng, cfg.p_grayscale, cfg.p_binarize)
        steps = math.ceil(n / self.batch_size)
        losses = []
        for s in range(steps):
            idx = order[s * self.batch_size:(s + 1) * self.batch_size]
            lr = cosine_warmup_lr(epoch + s / steps, cfg.pretrain_warmup, cfg.pretrain_epochs, cfg.pretrain_lr)
            losses.append(self.step(inputs[idx], targets[idx], lr))
        self.result.step_losses.extend(losses)
        mean = float(np.mean(losses))
        self.result.epoch_losses.append(mean)
        self.result.log.add(epoch=epoch + 1, split="train", loss=mean, lr=lr)
        logger.info("pretrain epoch %d loss %.5f", epoch + 1, mean)
        return mean


def pretrain_patches(
    batch: PatchBatch,
    cfg: PipelineConfig,
    model: MaskedAutoencoder | None = None,
    epochs: int | None = None,
    on_epoch: Callable[[int, Pretrainer], None] | None = None,
) -> PretrainResult:
    """Pretrain on a fixed patch set (targets computed once)."""
    trainer = Pretrainer(cfg, model)
    targets = compute_targets(batch, cfg)
    for epoch in range(epochs if epochs is not None else cfg.pretrain_epochs):
        trainer.run_epoch(epoch, batch, targets)
        if on_epoch:
            on_epoch(epoch, trainer)
    return trainer.result


def _page_job(args) -> PatchBatch:
    ref, idx, epoch, cfg = args
    img = load_page(ref)
    region = read_mask(ref.mask_path) if ref.mask_path else None
    rng = np.random.default_rng([cfg.seed, 2, epoch, idx])
    return extract_patches(img, cfg, cfg.patches_per_page, rng=rng, crop=True, page_id=ref.page_id, region=region)


def epoch_patches(pages: Sequence[PageRef], epoch: int, cfg: PipelineConfig, workers: int = 1) -> PatchBatch:
    """Fresh random crop and patch sample for every page.

    Each page uses its own seed derived from (seed, epoch, page index), so
    the result does not depend on the number of workers.
    """
    jobs = [(ref, i, epoch, cfg) for i, ref in enumerate(pages)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_page_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        parts = [_page_job(j) for j in jobs]
    return PatchBatch.concat(parts)


def pretrain(
    pages: Sequence[PageRef],
    cfg: PipelineConfig,
    workers: int = 1,
    model: MaskedAutoencoder | None = None,
    checkpoint_dir: Path | None = None,
    save: Callable[[Path, Pretrainer, int], None] | None = None,
) -> PretrainResult:
    """Full pipeline: per epoch, crop every page, sample patches, train."""
    if not pages:
        raise ValueError("no admitted pages to pretrain on")
    trainer = Pretrainer(cfg, model, dump_dir=checkpoint_dir)
    for epoch in range(cfg.pretrain_epochs):
        batch = epoch_patches(pages, epoch, cfg, workers)
        if len(batch) == 0:
            raise ValueError("no patch survived sampling; check binarization and ink threshold")
        trainer.run_epoch(epoch, batch, compute_targets(batch, cfg))
        if save and checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save(checkpoint_dir / f"pretrain_epoch{epoch + 1:04d}.sgck", trainer, epoch + 1)
    return trainer.result
