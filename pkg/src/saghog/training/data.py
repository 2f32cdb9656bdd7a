"""Page analysis, patch extraction, augmentation and reconstruction targets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .. import imaging
from ..config import PipelineConfig
from ..features import PatchBatch, detect_keypoints, hog_features, hog_features_intensity, sample_patches
from ..imaging import morph


@dataclass
class PageRef:
    page_id: str
    writer_id: str
    path: str
    mask_path: str | None = None


def binarize_page(gray: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    if cfg.binarization == "sauvola":
        return imaging.binarize_sauvola(gray, cfg.sauvola_window, cfg.sauvola_k, cfg.sauvola_r)
    return imaging.binarize_otsu(gray)


def input_view(img: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    """The page as the model sees it: color, gray, or binarized."""
    if cfg.input_mode == "color":
        return img if img.ndim == 3 else np.repeat(img[..., None], 3, axis=-1)
    gray = imaging.to_gray(img)
    if cfg.input_mode == "gray":
        return gray
    return binarize_page(gray, cfg)


def extract_patches(
    img: np.ndarray,
    cfg: PipelineConfig,
    limit: int | None,
    rng: np.random.Generator | None = None,
    crop: bool = False,
    page_id: str = "",
    region: np.ndarray | None = None,
) -> PatchBatch:
    """Binarize, detect keypoints on the binary page and cut patches.

    With ``rng`` the keypoints are visited in random order (training);
    without it in descending response order (encoding). ``crop`` first takes
    a random ``crop_size`` window, centred inside ``region`` when one is given.
    """
    if crop:
        if rng is None:
            raise ValueError("random cropping needs an rng")
        if region is not None:
            img = imaging.crop_in_region(img, region, cfg.crop_size, rng)
        else:
            img = imaging.random_crop(img, cfg.crop_size, rng)
    binary = binarize_page(imaging.to_gray(img), cfg)
    kps = detect_keypoints(binary, limit=cfg.keypoint_cap)
    order = rng.permutation(len(kps)) if rng is not None and kps else np.arange(len(kps))
    batch = sample_patches(binary, [kps[i] for i in order], cfg.min_ink, limit=limit,
                           source=input_view(img, cfg), page_id=page_id)
    # provenance refers to the detection (response) order, which is stable
    batch.provenance = [(pid, int(order[j])) for pid, j in batch.provenance]
    return batch


def patches_at(img: np.ndarray, cfg: PipelineConfig, indices: Sequence[int], page_id: str = "") -> tuple[PatchBatch, np.ndarray]:
    """Re-cut the patches of given keypoint indices (detection order).

    Returns the batch and the descriptors' source binary page. Indices whose
    window is no longer valid are dropped.
    """
    binary = binarize_page(imaging.to_gray(img), cfg)
    kps = detect_keypoints(binary, limit=cfg.keypoint_cap)
    idx = [i for i in indices if 0 <= i < len(kps)]
    batch = sample_patches(binary, [kps[i] for i in idx], cfg.min_ink, source=input_view(img, cfg), page_id=page_id)
    batch.provenance = [(pid, int(idx[j])) for pid, j in batch.provenance]
    return batch, binary


# ---------------------------------------------------------------------------
# augmentation


def as_uint8_view(patches: np.ndarray) -> np.ndarray:
    """Binary patches become ink-dark uint8; other views pass through."""
    p = np.asarray(patches)
    return np.where(p, 0, 255).astype(np.uint8) if p.dtype == bool else p


def augment_channels(
    patches: np.ndarray, binary: np.ndarray, rng: np.random.Generator, p_gray: float, p_bin: float
) -> np.ndarray:
    """Per patch: grayscale with ``p_gray``, binarized with ``p_bin`` (binarized wins)."""
    out = as_uint8_view(patches).copy()
    n = len(out)
    to_gray = rng.random(n) < p_gray
    to_bin = rng.random(n) < p_bin
    if out.ndim == 4:
        for i in np.flatnonzero(to_gray):
            out[i] = imaging.to_gray(out[i])[..., None]
        bin_view = np.where(binary, 0, 255).astype(np.uint8)[..., None]
    else:
        bin_view = np.where(binary, 0, 255).astype(np.uint8)
    out[to_bin] = bin_view[to_bin]
    return out


def random_kernel(rng: np.random.Generator) -> np.ndarray:
    k = rng.random((3, 3)) < 0.5
    k[1, 1] = True
    return k


def augment_morphology(
    patches: np.ndarray, rng: np.random.Generator, p_erode: float, p_dilate: float
) -> np.ndarray:
    """Erode or dilate the ink of single patches with a random 3x3 kernel."""
    p = np.asarray(patches)
    out = p.copy()
    n = len(p)
    erode = rng.random(n) < p_erode
    dilate = (rng.random(n) < p_dilate) & ~erode
    for i in np.flatnonzero(erode | dilate):
        k = random_kernel(rng)
        if p.dtype == bool:
            out[i] = morph(p[i], k, "erode" if erode[i] else "dilate")
            continue
        # ink is dark: thinning ink is a max filter, thickening a min filter
        fp = k if p.ndim == 3 else k[..., None]
        op = ndimage.grey_dilation if erode[i] else ndimage.grey_erosion
        out[i] = op(p[i], footprint=fp, mode="nearest")
    return out


# ---------------------------------------------------------------------------
# reconstruction targets


def compute_targets(batch: PatchBatch, cfg: PipelineConfig) -> np.ndarray:
    """Per-token targets ``(N, 64, target_dim)`` for the configured mode."""
    n = len(batch)
    if cfg.target_feature == "hog_bin":
        if batch.binary is None:
            raise ValueError("hog_bin targets need the binarized patches")
        h = hog_features(batch.binary, soft=cfg.hog_soft_binning)
    elif cfg.target_feature == "hog_gray":
        src = as_uint8_view(batch.patches)
        gray = src if src.ndim == 3 else np.stack([imaging.to_gray(p) for p in src])
        h = hog_features_intensity(gray, soft=cfg.hog_soft_binning)
    elif cfg.target_feature == "hog_rgb":
        src = as_uint8_view(batch.patches)
        h = hog_features_intensity(src if src.ndim == 4 else src[..., None].repeat(3, -1), soft=cfg.hog_soft_binning)
    else:
        return pixel_targets(batch.patches, cfg)
    return h.reshape(n, -1, 9).astype(np.float32)


def pixel_targets(patches: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    """Per-token pixel values normalized to zero mean and unit variance."""
    from ..model import patchify, to_input

    x = patchify(to_input(as_uint8_view(patches), cfg.in_chans, np.float64), cfg.token_size)
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return ((x - mu) / np.sqrt(var + 1e-6)).astype(np.float32)


def split_by_page(batch: PatchBatch) -> dict[str, np.ndarray]:
    """Patch indices grouped by page id, in first-seen order."""
    groups: dict[str, list[int]] = {}
    for i, (pid, _) in enumerate(batch.provenance):
        groups.setdefault(pid, []).append(i)
    return {k: np.array(v) for k, v in groups.items()}


def patch_ids(batch: PatchBatch) -> list[str]:
    return [f"{pid}#{kp}" for pid, kp in batch.provenance]


def load_page(ref: PageRef | str) -> np.ndarray:
    return imaging.read_image(ref.path if isinstance(ref, PageRef) else ref)


def page_patch_sets(
    pages: Sequence[tuple[str, np.ndarray]], cfg: PipelineConfig, limit: int, seed: int | None = None
) -> list[PatchBatch]:
    """Fixed patch set per full page; random keypoint order when ``seed`` is given."""
    out = []
    for i, (pid, img) in enumerate(pages):
        rng = None if seed is None else np.random.default_rng([seed, i])
        out.append(extract_patches(img, cfg, limit, rng=rng, page_id=pid))
    return out
