"""Mask filtering, page admission, the training manifest, and box IoU."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import imaging
from .features import detect_keypoints

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".pgm", ".bmp")

Box = tuple[float, float, float, float]


class MissingSidecar(FileNotFoundError):
    """A mask image without its ``.json`` confidence sidecar."""


@dataclass
class MaskCandidate:
    mask: np.ndarray
    confidence: float
    path: str | None = None


def edge_fraction(mask: np.ndarray, edges: np.ndarray) -> float:
    """Share of the mask's pixels that are edge pixels (0 for an empty mask)."""
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return 0.0
    return float((mask & np.asarray(edges, dtype=bool)).sum()) / n


def filter_masks(
    cands: Sequence[MaskCandidate],
    edges: np.ndarray,
    min_confidence: float = 0.8,
    min_edge_fraction: float = 0.10,
    max_masks: int = 2,
) -> list[MaskCandidate]:
    """Keep confident, edge-rich masks; at most ``max_masks`` by confidence.

    Ties in confidence keep the input order.
    """
    kept = []
    for c in cands:
        if c.mask.shape != edges.shape:
            raise ValueError(f"mask shape {c.mask.shape} differs from page shape {edges.shape}")
        if c.confidence >= min_confidence and edge_fraction(c.mask, edges) >= min_edge_fraction:
            kept.append(c)
    order = sorted(range(len(kept)), key=lambda i: -kept[i].confidence)
    return [kept[i] for i in order[:max_masks]]


def union_mask(cands: Sequence[MaskCandidate]) -> np.ndarray | None:
    if not cands:
        return None
    out = np.zeros(cands[0].mask.shape, dtype=bool)
    for c in cands:
        out |= c.mask
    return out


# ---------------------------------------------------------------------------
# boxes


def mask_to_bbox(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Tight inclusive pixel box ``(x0, y0, x1, y1)``; None for an empty mask."""
    mask = np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def pixel_box_area(box: Sequence[int]) -> Box:
    """Inclusive pixel box to its continuous extent (a pixel covers [x, x+1))."""
    x0, y0, x1, y1 = box
    return float(x0), float(y0), float(x1) + 1.0, float(y1) + 1.0


def bbox_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of continuous boxes ``(x0, y0, x1, y1)``; zero-area boxes give 0."""
    ax0, ay0, ax1, ay1 = map(float, a)
    bx0, by0, bx1, by1 = map(float, b)
    area_a = max(0.0, ax1 - ax0) * max(0.0, ay1 - ay0)
    area_b = max(0.0, bx1 - bx0) * max(0.0, by1 - by0)
    if area_a == 0.0 or area_b == 0.0:
        return 0.0
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def read_boxes(path: str | Path) -> dict[str, list[Box]]:
    """Ground-truth CSV ``page_id,x0,y0,x1,y1`` with inclusive pixel corners."""
    out: dict[str, list[Box]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            box = tuple(int(float(row[k])) for k in ("x0", "y0", "x1", "y1"))
            out.setdefault(row["page_id"], []).append(pixel_box_area(box))
    return out


def iou_at(predicted: dict[str, list[Box]], truth: dict[str, list[Box]], threshold: float = 0.5) -> float:
    """Fraction of predicted boxes whose best IoU with a ground-truth box reaches ``threshold``."""
    hits, total = 0, 0
    for page, boxes in predicted.items():
        gts = truth.get(page, [])
        for b in boxes:
            total += 1
            if gts and max(bbox_iou(b, g) for g in gts) >= threshold:
                hits += 1
    return hits / total if total else 0.0


# ---------------------------------------------------------------------------
# pages and manifest


@dataclass
class PageRecord:
    page_id: str
    writer_id: str
    path: str
    admitted: bool = False
    kp_count: int = 0
    mask_path: str | None = None
    split: str = "train"
    error: str | None = None
    mask: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        d = {
            "page_id": self.page_id,
            "writer_id": self.writer_id,
            "path": self.path,
            "admitted": self.admitted,
            "kp_count": self.kp_count,
            "split": self.split,
        }
        if self.mask_path is not None:
            d["mask_path"] = self.mask_path
        if self.error is not None:
            d["error"] = self.error
        return d


def admit_page(rec: PageRecord, min_kps: int = 1000, require_mask: bool = False) -> bool:
    """Admit iff the keypoint count reaches ``min_kps`` (and a mask exists when required)."""
    if rec.error is not None:
        return False
    if require_mask and rec.mask is None and rec.mask_path is None:
        return False
    return rec.kp_count >= min_kps


@dataclass
class Manifest:
    records: list[PageRecord]
    unreadable: list[tuple[str, str]] = field(default_factory=list)

    def admitted(self, split: str | None = None) -> list[PageRecord]:
        return [r for r in self.records if r.admitted and (split is None or r.split == split)]

    def writers(self, split: str | None = None) -> list[str]:
        return sorted({r.writer_id for r in self.records if split is None or r.split == split})

    def to_jsonl(self, path: str | Path) -> None:
        lines = [json.dumps(r.to_json(), sort_keys=True) for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "Manifest":
        recs, bad = [], []
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            rec = PageRecord(
                page_id=d["page_id"], writer_id=d["writer_id"], path=d["path"], admitted=d["admitted"],
                kp_count=d["kp_count"], mask_path=d.get("mask_path"), split=d["split"], error=d.get("error"),
            )
            recs.append(rec)
            if rec.error is not None:
                bad.append((rec.path, rec.error))
        return cls(recs, bad)


def split_writers(writers: Iterable[str], val_fraction: float, seed: int) -> set[str]:
    """Deterministic writer-level validation split, ``round(val_fraction * n)`` writers."""
    ws = sorted(set(writers))
    n_val = int(np.floor(val_fraction * len(ws) + 0.5))
    perm = np.random.default_rng(seed).permutation(len(ws))
    return {ws[i] for i in perm[:n_val]}


def discover_pages(root: str | Path) -> list[tuple[str, str, str]]:
    """``(page_id, writer_id, path)`` from ``index.csv`` or a ``<writer>/<page>.<ext>`` tree."""
    root = Path(root)
    index = root / "index.csv"
    if index.exists():
        with open(index, newline="") as fh:
            rows = list(csv.DictReader(fh))
        missing = {"page_id", "writer_id", "path"} - set(rows[0] if rows else {})
        if missing:
            raise ValueError(f"{index} lacks columns {sorted(missing)}")
        return [(r["page_id"], r["writer_id"], str(root / r["path"])) for r in rows]
    out = []
    for wdir in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(wdir.iterdir()):
            if f.suffix.lower() in IMAGE_SUFFIXES:
                out.append((f.stem, wdir.name, str(f)))
    if not out:
        raise FileNotFoundError(f"no index.csv and no <writer>/<page> images under {root}")
    return out


def find_mask_candidates(masks_dir: str | Path, page_id: str, strict: bool = False) -> list[MaskCandidate]:
    """Masks named ``<page_id>.png`` or ``<page_id>_<k>.png``, each with a ``.json`` sidecar.

    A mask without sidecar raises ``MissingSidecar`` when ``strict``, else it
    is skipped with a warning.
    """
    masks_dir = Path(masks_dir)
    paths = sorted(p for p in masks_dir.glob(f"{page_id}*.png") if p.stem == page_id or p.stem.startswith(page_id + "_"))
    out = []
    for p in paths:
        side = p.with_suffix(".json")
        if not side.exists():
            if strict:
                raise MissingSidecar(f"mask {p} has no sidecar {side}")
            logger.warning("mask %s has no sidecar; ignored", p)
            continue
        conf = float(json.loads(side.read_text())["confidence"])
        out.append(MaskCandidate(imaging.read_mask(p), conf, str(p)))
    return out


@dataclass(frozen=True)
class CurationRules:
    min_confidence: float = 0.8
    min_edge_fraction: float = 0.10
    max_masks: int = 2
    min_keypoints: int = 1000
    require_mask: bool = False
    canny_low: float = 50.0
    canny_high: float = 150.0
    binarization: str = "sauvola"
    sauvola_window: int = 25
    sauvola_k: float = 0.2
    sauvola_r: float = 128.0

    @classmethod
    def from_config(cls, cfg) -> "CurationRules":
        return cls(
            cfg.mask_min_confidence, cfg.mask_min_edge_fraction, cfg.max_masks, cfg.min_keypoints,
            cfg.require_mask, cfg.canny_low, cfg.canny_high, cfg.binarization,
            cfg.sauvola_window, cfg.sauvola_k, cfg.sauvola_r,
        )


def count_keypoints(img: np.ndarray, rules: CurationRules, region: np.ndarray | None = None) -> int:
    gray = imaging.to_gray(img)
    if rules.binarization == "sauvola":
        binary = imaging.binarize_sauvola(gray, rules.sauvola_window, rules.sauvola_k, rules.sauvola_r)
    else:
        binary = imaging.binarize_otsu(gray)
    kps = detect_keypoints(binary)
    if region is None:
        return len(kps)
    h, w = region.shape
    return sum(
        1 for k in kps
        if region[min(h - 1, int(np.floor(k.y + 0.5))), min(w - 1, int(np.floor(k.x + 0.5)))]
    )


def curate_page(entry: tuple[str, str, str], rules: CurationRules, masks_dir: str | None) -> PageRecord:
    page_id, writer_id, path = entry
    rec = PageRecord(page_id, writer_id, path)
    try:
        img = imaging.read_image(path)
    except Exception as exc:  # unreadable files are reported, not dropped
        rec.error = f"{type(exc).__name__}: {exc}"
        return rec
    region = None
    if masks_dir is not None:
        cands = find_mask_candidates(masks_dir, page_id, strict=rules.require_mask)
        if cands:
            edges = imaging.edge_map(imaging.to_gray(img), rules.canny_low, rules.canny_high)
            region = union_mask(filter_masks(cands, edges, rules.min_confidence, rules.min_edge_fraction, rules.max_masks))
        rec.mask = region
    if region is None and rules.require_mask:
        rec.admitted = False
        return rec
    rec.kp_count = count_keypoints(img, rules, region)
    rec.admitted = admit_page(rec, rules.min_keypoints, rules.require_mask)
    return rec


def _curate_job(args) -> PageRecord:
    return curate_page(*args)


def build_manifest(
    root: str | Path,
    rules: CurationRules = CurationRules(),
    val_fraction: float = 0.1,
    seed: int = 0,
    masks_dir: str | Path | None = None,
    mask_out_dir: str | Path | None = None,
    workers: int = 1,
) -> Manifest:
    """Curate every page under ``root`` and assign a writer-level split.

    Accepted mask unions are written to ``mask_out_dir`` (if given) and
    referenced from the records.
    """
    entries = discover_pages(root)
    md = None if masks_dir is None else str(masks_dir)
    jobs = [(e, rules, md) for e in entries]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            records = list(ex.map(_curate_job, jobs))
    else:
        records = [_curate_job(j) for j in jobs]
    val = split_writers((r.writer_id for r in records), val_fraction, seed)
    for r in records:
        r.split = "val" if r.writer_id in val else "train"
        if r.mask is not None and mask_out_dir is not None:
            out = Path(mask_out_dir)
            out.mkdir(parents=True, exist_ok=True)
            r.mask_path = str(out / f"{r.page_id}.png")
            imaging.write_mask(r.mask_path, r.mask)
    unreadable = [(r.path, r.error) for r in records if r.error is not None]
    for path, err in unreadable:
        logger.warning("unreadable page %s: %s", path, err)
    return Manifest(records, unreadable)
