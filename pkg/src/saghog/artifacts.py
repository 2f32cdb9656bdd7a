"""Artifact metadata, config-hash chaining, and model checkpoints."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any

import numpy as np

from .autodiff import load_checkpoint, read_meta, save_checkpoint
from .config import LINEAGE_KEYS, PipelineConfig
from .model import MaskedAutoencoder, ViTConfig, WriterNet

CHECKPOINT_SUFFIX = ".sgck"


class ChainMismatch(ValueError):
    """An upstream artifact was produced under incompatible settings."""


def cache_dir() -> Path:
    return Path(os.environ.get("SAGHOG_CACHE", Path.home() / ".cache" / "saghog"))


def sidecar(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def artifact_meta(kind: str, cfg: PipelineConfig, **extra: Any) -> dict:
    return {
        "kind": kind,
        "config_hash": cfg.hash(),
        "lineage_hash": cfg.lineage_hash(),
        "config": cfg.to_dict(),
        **extra,
    }


def write_sidecar(path: str | Path, meta: dict) -> None:
    sidecar(path).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def load_meta(path: str | Path) -> dict:
    """Metadata of any artifact: embedded for checkpoints, sidecar otherwise."""
    path = Path(path)
    if path.suffix == CHECKPOINT_SUFFIX:
        return read_meta(path)
    side = sidecar(path)
    if not side.exists():
        raise FileNotFoundError(f"{path} has no metadata sidecar {side}")
    return json.loads(side.read_text())


def check_chain(
    meta: dict, cfg: PipelineConfig, what: str, keys: tuple[str, ...] = LINEAGE_KEYS, force: bool = False
) -> list[str]:
    """Refuse upstream artifacts produced under different ``keys`` settings.

    Returns the names of differing settings (non-empty only when forced).
    """
    theirs = meta.get("config")
    if theirs is None:
        if force:
            return ["config"]
        raise ChainMismatch(f"{what} carries no configuration; rerun it or pass --force")
    ours = cfg.to_dict()
    diff = [k for k in keys if theirs.get(k) != ours.get(k)]
    if diff and not force:
        raise ChainMismatch(
            f"{what} was produced with different settings ({', '.join(diff)}); rerun it or pass --force"
        )
    return diff


def check_model_dims(meta: dict, cfg: PipelineConfig, what: str) -> None:
    """Compare the checkpoint's encoder shape with the config, before any work."""
    vit = meta.get("vit")
    if vit is None:
        raise ChainMismatch(f"{what} carries no model configuration")
    want = cfg.vit()
    pairs = [
        ("encoder_dim", vit["dim"], want.dim),
        ("encoder_depth", vit["depth"], want.depth),
        ("token_size", vit["patch_size"], want.patch_size),
        ("input channels", vit["in_chans"], want.in_chans),
    ]
    bad = [f"{n}: checkpoint {a} vs config {b}" for n, a, b in pairs if a != b]
    if bad:
        raise ChainMismatch(f"{what} does not match the configuration ({'; '.join(bad)})")


def save_model(path: str | Path, model: MaskedAutoencoder | WriterNet, cfg: PipelineConfig, kind: str, opt_state=None, **extra) -> None:
    meta = artifact_meta(kind, cfg, vit=model.cfg.to_dict(), input_mode=cfg.input_mode,
                         netrvlad_mode=model.cfg.netrvlad_mode, **extra)
    opt = None
    if opt_state is not None:
        opt = {f"m.{i}": m for i, m in enumerate(opt_state.m)}
        opt.update({f"v.{i}": v for i, v in enumerate(opt_state.v)})
        meta["optimizer_step"] = opt_state.step
    save_checkpoint(path, model.state_dict(), meta, opt)


def load_model(path: str | Path) -> tuple[MaskedAutoencoder | WriterNet, dict]:
    params, meta, _ = load_checkpoint(path)
    vit = ViTConfig(**meta["vit"])
    rng = np.random.default_rng(0)
    model = WriterNet(vit, rng) if meta["kind"] == "writer" else MaskedAutoencoder(vit, rng)
    model.load_state_dict(params)
    return model.to(np.float32), meta


def encoder_state(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k[len("encoder."):]: v for k, v in params.items() if k.startswith("encoder.")}
