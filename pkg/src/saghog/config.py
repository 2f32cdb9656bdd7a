"""Flat pipeline configuration with ``paper`` and ``desk`` profiles.

Files are TOML; keys may sit at top level or inside any table (tables are
only for readability, names must be unique). Unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .model import ViTConfig

TARGET_MODES = ("pixel", "hog_rgb", "hog_gray", "hog_bin")
INPUT_MODES = ("color", "gray", "binary")


@dataclass(frozen=True)
class PipelineConfig:
    profile: str = "paper"
    seed: int = 0
    workers: int = 1

    # curation
    mask_min_confidence: float = 0.8
    mask_min_edge_fraction: float = 0.10
    max_masks: int = 2
    min_keypoints: int = 1000
    require_mask: bool = False
    val_fraction: float = 0.1
    canny_low: float = 50.0
    canny_high: float = 150.0

    # binarization and patch sampling
    binarization: str = "sauvola"
    sauvola_window: int = 25
    sauvola_k: float = 0.2
    sauvola_r: float = 128.0
    crop_size: int = 256
    patches_per_page: int = 32
    min_ink: float = 0.01
    keypoint_cap: int = 512
    encode_patches_per_page: int = 512

    # model
    input_mode: str = "color"
    token_size: int = 4
    encoder_dim: int = 512
    encoder_depth: int = 8
    decoder_dim: int = 256
    decoder_depth: int = 1
    mlp_ratio: float = 4.0
    target_feature: str = "hog_bin"
    hog_soft_binning: bool = False
    mask_ratio: float = 0.75
    netrvlad_clusters: int = 100
    netrvlad_mode: str = "class_token"

    # pretraining
    pretrain_epochs: int = 200
    pretrain_lr: float = 8e-4
    pretrain_weight_decay: float = 0.05
    pretrain_batch_pages: int = 64
    pretrain_clip: float = 0.02
    pretrain_warmup: int = 5
    clip_mode: str = "norm"
    p_grayscale: float = 0.2
    p_binarize: float = 0.2
    checkpoint_every: int = 10

    # pseudo-labels
    cluster_k: int = 5000
    ratio_test: float = 0.9
    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-4
    cluster_patches_per_page: int = 512

    # finetuning
    regime: str = "supervised"
    freeze_backbone: bool = False
    finetune_epochs: int = 50
    finetune_lr: float = 1e-3
    finetune_weight_decay: float = 0.01
    finetune_clip: float = 1.0
    finetune_warmup: int = 5
    batch_classes: int = 64
    samples_per_class: int = 16
    finetune_patches_per_page: int = 32
    p_erode: float = 0.1
    p_dilate: float = 0.1
    token_dropout: float = 0.1
    patience: int = 5
    ms_alpha: float = 2.0
    ms_beta: float = 50.0
    ms_base: float = 0.5
    ms_margin: float = 0.1

    # retrieval
    pca_dim: int = 512
    power_alpha: float = 0.4
    whiten: bool = True

    def __post_init__(self):
        checks = [
            (self.binarization in ("sauvola", "otsu"), "binarization must be sauvola or otsu"),
            (self.target_feature in TARGET_MODES, f"target_feature must be one of {TARGET_MODES}"),
            (self.input_mode in INPUT_MODES, f"input_mode must be one of {INPUT_MODES}"),
            (self.regime in ("supervised", "cls"), "regime must be supervised or cls"),
            (self.clip_mode in ("norm", "value"), "clip_mode must be norm or value"),
            (0.0 < self.mask_ratio < 1.0, "mask_ratio must be in (0, 1)"),
            (0.0 <= self.val_fraction < 1.0, "val_fraction must be in [0, 1)"),
            (self.workers >= 1, "workers must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        self.vit()  # validates the model dimensions

    @property
    def in_chans(self) -> int:
        return 3 if self.input_mode == "color" else 1

    @property
    def target_dim(self) -> int:
        if self.target_feature == "pixel":
            return self.token_size**2 * self.in_chans
        return 9

    def vit(self) -> ViTConfig:
        return ViTConfig(
            patch_size=self.token_size,
            in_chans=self.in_chans,
            dim=self.encoder_dim,
            depth=self.encoder_depth,
            decoder_dim=self.decoder_dim,
            decoder_depth=self.decoder_depth,
            mlp_ratio=self.mlp_ratio,
            target_dim=self.target_dim,
            clusters=self.netrvlad_clusters,
            netrvlad_mode=self.netrvlad_mode,
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def hash(self, keys: tuple[str, ...] | None = None) -> str:
        d = self.to_dict()
        if keys is not None:
            d = {k: d[k] for k in keys}
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def lineage_hash(self) -> str:
        """Hash of the settings that every downstream artifact must share."""
        return self.hash(LINEAGE_KEYS)

    def with_overrides(self, **kw) -> "PipelineConfig":
        unknown = set(kw) - KNOWN_KEYS
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **kw)


KNOWN_KEYS = frozenset(f.name for f in fields(PipelineConfig))

# settings that change what a patch means
DATA_KEYS = ("input_mode", "binarization", "sauvola_window", "sauvola_k", "sauvola_r", "min_ink", "keypoint_cap")
# ... and what an encoder means
MODEL_KEYS = ("token_size", "encoder_dim", "encoder_depth", "mlp_ratio")
LINEAGE_KEYS = DATA_KEYS + MODEL_KEYS

PROFILES: dict[str, dict[str, Any]] = {
    "paper": {},
    "desk": {
        "encoder_dim": 64,
        "encoder_depth": 2,
        "decoder_dim": 64,
        "netrvlad_clusters": 16,
        "netrvlad_mode": "tokens",
        "cluster_k": 256,
        "pretrain_epochs": 50,
        "pretrain_batch_pages": 8,
        "pretrain_warmup": 2,
        "finetune_epochs": 15,
        "finetune_warmup": 1,
        "batch_classes": 16,
        "samples_per_class": 16,
        "min_keypoints": 100,
        "keypoint_cap": 400,
        "encode_patches_per_page": 200,
        "cluster_patches_per_page": 200,
        "pca_dim": 64,
    },
}


def profile(name: str = "paper", **overrides) -> PipelineConfig:
    if name not in PROFILES:
        raise KeyError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return PipelineConfig().with_overrides(**{"profile": name, **PROFILES[name], **overrides})


def _flatten(d: dict, out: dict, where: str = "") -> None:
    for k, v in d.items():
        if isinstance(v, dict):
            _flatten(v, out, f"{where}{k}.")
            continue
        if k in out:
            raise KeyError(f"duplicate config key {k!r} (at {where}{k})")
        out[k] = v


def load_config(path: str | Path | None = None, profile_name: str | None = None, **overrides) -> PipelineConfig:
    """Resolve profile defaults, then the file, then explicit overrides."""
    values: dict[str, Any] = {}
    if path is not None:
        with open(path, "rb") as fh:
            _flatten(tomllib.load(fh), values)
    unknown = set(values) - KNOWN_KEYS
    if unknown:
        raise KeyError(f"unknown config keys in {path}: {sorted(unknown)}")
    name = profile_name or values.pop("profile", None) or "paper"
    values.pop("profile", None)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return profile(name, **values)


def dump_toml(cfg: PipelineConfig) -> str:
    """Serialize as flat TOML (all values are scalars)."""
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, bool):
            s = "true" if v else "false"
        elif isinstance(v, str):
            s = json.dumps(v)
        else:
            s = repr(v)
        lines.append(f"{k} = {s}")
    return "\n".join(lines) + "\n"
