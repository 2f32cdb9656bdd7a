"""Keypoints, SIFT descriptors, HOG targets and keypoint-centred patch sampling."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

PATCH_SIZE = 32
HOG_BINS = 9
DESCRIPTOR_MAGIC = b"SGHD"


class Keypoint(NamedTuple):
    x: float
    y: float
    scale: float
    response: float


@dataclass
class PatchBatch:
    """Equally shaped patches plus where they came from.

    ``patches`` holds the model-input view (color, gray or binary) and
    ``binary`` the binarized view used for HOG targets, when available.
    """

    patches: np.ndarray
    provenance: list[tuple[str, int]]
    binary: np.ndarray | None = None
    labels: np.ndarray | None = None
    keypoints: list[Keypoint] = field(default_factory=list)

    def __post_init__(self):
        if len(self.provenance) != len(self.patches):
            raise ValueError("provenance length must equal patch count")

    def __len__(self) -> int:
        return len(self.patches)

    def select(self, idx) -> "PatchBatch":
        idx = np.asarray(idx, dtype=int)
        return PatchBatch(
            patches=self.patches[idx],
            provenance=[self.provenance[i] for i in idx],
            binary=None if self.binary is None else self.binary[idx],
            labels=None if self.labels is None else self.labels[idx],
            keypoints=[self.keypoints[i] for i in idx] if self.keypoints else [],
        )

    @staticmethod
    def concat(batches: Sequence["PatchBatch"]) -> "PatchBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            return PatchBatch(np.zeros((0, PATCH_SIZE, PATCH_SIZE), np.uint8), [])
        has_bin = all(b.binary is not None for b in batches)
        has_lab = all(b.labels is not None for b in batches)
        return PatchBatch(
            patches=np.concatenate([b.patches for b in batches]),
            provenance=[p for b in batches for p in b.provenance],
            binary=np.concatenate([b.binary for b in batches]) if has_bin else None,
            labels=np.concatenate([b.labels for b in batches]) if has_lab else None,
            keypoints=[k for b in batches for k in b.keypoints],
        )


# ---------------------------------------------------------------------------
# difference-of-Gaussians keypoints


def detect_keypoints(
    img: np.ndarray,
    n_octaves: int = 3,
    scales_per_octave: int = 3,
    sigma: float = 1.6,
    contrast_threshold: float = 0.04,
    edge_threshold: float = 10.0,
    limit: int | None = None,
) -> list[Keypoint]:
    """DoG scale-space extrema of a (binary or gray) page.

    Binary input is rendered dark-on-light in [0, 1]; gray input is scaled by
    1/255. The contrast threshold is divided by the number of scales per
    octave, as in common SIFT implementations. Keypoints are returned sorted
    by descending response (ties by y, then x).
    """
    img = np.asarray(img)
    if img.size == 0:
        raise ValueError("empty image")
    if img.dtype == bool:
        base = np.where(img, 0.0, 1.0)
    else:
        base = img.astype(np.float64) / 255.0
    S = scales_per_octave
    thr = contrast_threshold / S
    edge_ratio = (edge_threshold + 1.0) ** 2 / edge_threshold
    sigmas = sigma * 2.0 ** (np.arange(S + 3) / S)

    xs, ys, scs, resp = [], [], [], []
    octave_img = ndimage.gaussian_filter(base, np.sqrt(sigma**2 - 0.5**2), mode="nearest")
    for o in range(n_octaves):
        if min(octave_img.shape) < 8:
            break
        gauss = [octave_img]
        for i in range(1, S + 3):
            inc = np.sqrt(sigmas[i] ** 2 - sigmas[i - 1] ** 2)
            gauss.append(ndimage.gaussian_filter(gauss[-1], inc, mode="nearest"))
        dog = np.stack([gauss[i + 1] - gauss[i] for i in range(S + 2)])
        found = _dog_extrema(dog, thr, edge_ratio, S)
        if found is not None:
            x, y, s, r = found
            f = 2.0**o
            xs.append(x * f)
            ys.append(y * f)
            scs.append(sigma * 2.0 ** (s / S) * f)
            resp.append(r)
        octave_img = gauss[S][::2, ::2]

    if not xs:
        return []
    x, y, s, r = (np.concatenate(a) for a in (xs, ys, scs, resp))
    h, w = base.shape
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    x, y, s, r = x[inside], y[inside], s[inside], r[inside]
    order = np.lexsort((x, y, -r))
    if limit is not None:
        order = order[:limit]
    return [Keypoint(float(x[i]), float(y[i]), float(s[i]), float(r[i])) for i in order]


def _dog_extrema(dog: np.ndarray, thr: float, edge_ratio: float, S: int):
    maxf = ndimage.maximum_filter(dog, size=3, mode="nearest")
    minf = ndimage.minimum_filter(dog, size=3, mode="nearest")
    cand = ((dog == maxf) | (dog == minf)) & (np.abs(dog) > 0.5 * thr)
    # only the interior scales, one-pixel spatial margin
    cand[0] = cand[-1] = False
    cand[:, :1] = cand[:, -1:] = False
    cand[:, :, :1] = cand[:, :, -1:] = False
    s, y, x = np.nonzero(cand)
    if len(s) == 0:
        return None
    D = dog

    def at(ds, dy, dx):
        return D[s + ds, y + dy, x + dx]

    v = at(0, 0, 0)
    g = np.stack([
        0.5 * (at(0, 0, 1) - at(0, 0, -1)),
        0.5 * (at(0, 1, 0) - at(0, -1, 0)),
        0.5 * (at(1, 0, 0) - at(-1, 0, 0)),
    ], axis=1)
    dxx = at(0, 0, 1) + at(0, 0, -1) - 2 * v
    dyy = at(0, 1, 0) + at(0, -1, 0) - 2 * v
    dss = at(1, 0, 0) + at(-1, 0, 0) - 2 * v
    dxy = 0.25 * (at(0, 1, 1) - at(0, 1, -1) - at(0, -1, 1) + at(0, -1, -1))
    dxs = 0.25 * (at(1, 0, 1) - at(1, 0, -1) - at(-1, 0, 1) + at(-1, 0, -1))
    dys = 0.25 * (at(1, 1, 0) - at(1, -1, 0) - at(-1, 1, 0) + at(-1, -1, 0))
    H = np.stack([
        np.stack([dxx, dxy, dxs], -1),
        np.stack([dxy, dyy, dys], -1),
        np.stack([dxs, dys, dss], -1),
    ], axis=1)
    det3 = np.linalg.det(H)
    ok = np.abs(det3) > 1e-12
    off = np.zeros_like(g)
    if ok.any():
        off[ok] = -np.linalg.solve(H[ok], g[ok][..., None])[..., 0]
    ok &= np.all(np.abs(off) < 1.0, axis=1)
    val = v + 0.5 * np.sum(g * off, axis=1)
    tr = dxx + dyy
    det2 = dxx * dyy - dxy**2
    ok &= np.abs(val) >= thr
    ok &= (det2 > 0) & (tr**2 * 1.0 < edge_ratio * det2)
    if not ok.any():
        return None
    return (
        x[ok] + off[ok, 0],
        y[ok] + off[ok, 1],
        s[ok] + off[ok, 2],
        np.abs(val[ok]),
    )


# ---------------------------------------------------------------------------
# SIFT descriptors (upright)


def _image_gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    f = np.where(img, 0.0, 255.0) if img.dtype == bool else np.asarray(img, dtype=np.float64)
    gx = np.zeros_like(f)
    gy = np.zeros_like(f)
    gx[:, 1:-1] = 0.5 * (f[:, 2:] - f[:, :-2])
    gy[1:-1, :] = 0.5 * (f[2:, :] - f[:-2, :])
    return gx, gy


def sift_descriptors(
    img: np.ndarray, kps: Sequence[Keypoint], base_sigma: float = 1.6, upright: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Compute 128-d descriptors for many keypoints sharing one image.

    Returns ``(descriptors, valid)``; keypoints whose 16x16 support (sample
    spacing ``scale / base_sigma``) leaves the image get a zero row and
    ``valid=False``.
    """
    if not upright:
        raise NotImplementedError("only upright descriptors are supported")
    img = np.asarray(img)
    gx, gy = _image_gradients(img)
    h, w = gx.shape
    out = np.zeros((len(kps), 128))
    valid = np.zeros(len(kps), dtype=bool)
    grid = np.arange(16) - 7.5
    gv, gu = np.meshgrid(grid, grid, indexing="ij")
    weight = np.exp(-(gu**2 + gv**2) / (2 * 8.0**2))
    cell = (np.arange(16) + 0.5) / 4.0 - 0.5
    cv, cu = np.meshgrid(cell, cell, indexing="ij")
    for i, kp in enumerate(kps):
        step = kp.scale / base_sigma
        px = kp.x + gu * step
        py = kp.y + gv * step
        if px.min() < 1 or py.min() < 1 or px.max() > w - 2 or py.max() > h - 2:
            continue
        coords = np.stack([py.ravel(), px.ravel()])
        sx = ndimage.map_coordinates(gx, coords, order=1).reshape(16, 16)
        sy = ndimage.map_coordinates(gy, coords, order=1).reshape(16, 16)
        out[i] = _descriptor_from_samples(sx, sy, weight, cu, cv)
        valid[i] = True
    skipped = len(kps) - int(valid.sum())
    if skipped:
        logger.debug("skipped %d descriptors with out-of-bounds support", skipped)
    return out, valid


def _descriptor_from_samples(sx, sy, weight, cu, cv) -> np.ndarray:
    mag = np.hypot(sx, sy) * weight
    ori = np.mod(np.arctan2(sy, sx), 2 * np.pi) / (2 * np.pi) * 8.0
    hist = np.zeros((6, 6, 8))  # spatial bins padded by one on each side
    r0, c0, o0 = np.floor(cv).astype(int), np.floor(cu).astype(int), np.floor(ori).astype(int)
    dr, dc, do = cv - r0, cu - c0, ori - o0
    for a in (0, 1):
        wr = dr if a else 1 - dr
        for b in (0, 1):
            wc = dc if b else 1 - dc
            for c in (0, 1):
                wo = do if c else 1 - do
                np.add.at(hist, (r0 + a + 1, c0 + b + 1, (o0 + c) % 8), mag * wr * wc * wo)
    d = hist[1:5, 1:5].ravel()
    n = np.linalg.norm(d)
    if n < 1e-12:
        return np.zeros(128)
    d = np.minimum(d / n, 0.2)
    n = np.linalg.norm(d)
    return d / n if n > 1e-12 else np.zeros(128)


def sift_descriptor(img: np.ndarray, kp: Keypoint) -> np.ndarray | None:
    """Upright SIFT descriptor of a single keypoint, or ``None`` if out of bounds."""
    d, ok = sift_descriptors(img, [kp])
    return d[0] if ok[0] else None


# ---------------------------------------------------------------------------
# HOG targets


def _gradients(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    padded = np.pad(f, ((0, 0), (1, 1), (1, 1)), mode="edge")
    gx = padded[:, 1:-1, 2:] - padded[:, 1:-1, :-2]
    gy = padded[:, 2:, 1:-1] - padded[:, :-2, 1:-1]
    return gx, gy


def _cell_histograms(gx: np.ndarray, gy: np.ndarray, cell: int, soft: bool) -> np.ndarray:
    mag = np.hypot(gx, gy)
    deg = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    width = 180.0 / HOG_BINS
    n = gx.shape[0]
    nc = PATCH_SIZE // cell
    cy = np.arange(PATCH_SIZE) // cell
    cell_idx = (cy[:, None] * nc + cy[None, :])[None].repeat(n, 0)
    base = (np.arange(n)[:, None, None] * nc * nc + cell_idx) * HOG_BINS
    hist = np.zeros(n * nc * nc * HOG_BINS)
    if soft:
        pos = deg / width - 0.5
        lo = np.floor(pos).astype(int)
        frac = pos - lo
        np.add.at(hist, (base + lo % HOG_BINS).ravel(), (mag * (1 - frac)).ravel())
        np.add.at(hist, (base + (lo + 1) % HOG_BINS).ravel(), (mag * frac).ravel())
    else:
        b = np.minimum((deg // width).astype(int), HOG_BINS - 1)
        np.add.at(hist, (base + b).ravel(), mag.ravel())
    hist = hist.reshape(n, nc, nc, HOG_BINS)
    norm = np.linalg.norm(hist, axis=-1, keepdims=True)
    return np.where(norm < 1e-6, 0.0, hist / np.where(norm < 1e-6, 1.0, norm))


def _as_stack(patches: np.ndarray, extra_dims: int = 0) -> tuple[np.ndarray, bool]:
    p = np.asarray(patches)
    single = p.ndim == 2 + extra_dims
    if single:
        p = p[None]
    if p.shape[1:3] != (PATCH_SIZE, PATCH_SIZE):
        raise ValueError(f"expected {PATCH_SIZE}x{PATCH_SIZE} patches, got {p.shape[1:3]}")
    return p, single


def hog_features(patches: np.ndarray, cell: int = 4, soft: bool = False) -> np.ndarray:
    """9-bin unsigned HOG of binary patches.

    Accepts a single ``(32, 32)`` patch or a stack ``(N, 32, 32)``; returns
    ``(8, 8, 9)`` or ``(N, 8, 8, 9)``. Gradients use the fixed kernel
    ``[-1, 0, 1]`` (and its transpose) on the 0/1 image with replicate
    padding; each cell histogram is l2-normalized, cells with norm < 1e-6
    are zeroed.
    """
    p, single = _as_stack(patches)
    f = (p != 0).astype(np.float64)
    hist = _cell_histograms(*_gradients(f), cell, soft)
    return hist[0] if single else hist


def hog_features_intensity(patches: np.ndarray, cell: int = 4, soft: bool = False) -> np.ndarray:
    """HOG of uint8 gray ``(N, 32, 32)`` or color ``(N, 32, 32, 3)`` patches.

    For color, each pixel takes the gradient of the channel with the largest
    magnitude. Intensities are scaled to [0, 1].
    """
    p = np.asarray(patches)
    color = p.ndim == 4 or (p.ndim == 3 and p.shape[-1] == 3 and p.shape[0] == PATCH_SIZE)
    p, single = _as_stack(p, 1 if color else 0)
    f = p.astype(np.float64) / 255.0
    if color:
        gxs, gys = zip(*(_gradients(f[..., c]) for c in range(f.shape[-1])))
        gx, gy = np.stack(gxs, -1), np.stack(gys, -1)
        pick = np.argmax(gx * gx + gy * gy, axis=-1)[..., None]
        gx = np.take_along_axis(gx, pick, -1)[..., 0]
        gy = np.take_along_axis(gy, pick, -1)[..., 0]
    else:
        gx, gy = _gradients(f)
    hist = _cell_histograms(gx, gy, cell, soft)
    return hist[0] if single else hist


# ---------------------------------------------------------------------------
# patch sampling


def sample_patches(
    binary: np.ndarray,
    kps: Sequence[Keypoint],
    min_ink: float = 0.01,
    limit: int | None = None,
    source: np.ndarray | None = None,
    page_id: str = "",
) -> PatchBatch:
    """Cut 32x32 windows centred on keypoints.

    Windows crossing the image border are skipped and so are windows whose
    ink fraction is below ``min_ink``. At most ``limit`` patches are kept, in
    keypoint order (callers pass keypoints sorted by response). If ``source``
    is given, the model-input patches are cut from it at the same positions.
    """
    binary = np.asarray(binary, dtype=bool)
    h, w = binary.shape
    half = PATCH_SIZE // 2
    cut_bin, cut_src, prov, kept = [], [], [], []
    for i, kp in enumerate(kps):
        if limit is not None and len(cut_bin) >= limit:
            break
        cx, cy = int(np.floor(kp.x + 0.5)), int(np.floor(kp.y + 0.5))
        y0, x0 = cy - half, cx - half
        if y0 < 0 or x0 < 0 or y0 + PATCH_SIZE > h or x0 + PATCH_SIZE > w:
            continue
        win = binary[y0:y0 + PATCH_SIZE, x0:x0 + PATCH_SIZE]
        if win.sum() < min_ink * PATCH_SIZE * PATCH_SIZE:
            continue
        cut_bin.append(win)
        if source is not None:
            cut_src.append(source[y0:y0 + PATCH_SIZE, x0:x0 + PATCH_SIZE])
        prov.append((page_id, i))
        kept.append(kp)
    if not cut_bin:
        shape = (0, PATCH_SIZE, PATCH_SIZE) + (() if source is None else source.shape[2:])
        dtype = bool if source is None else source.dtype
        return PatchBatch(np.zeros(shape, dtype), [], binary=np.zeros((0, PATCH_SIZE, PATCH_SIZE), bool))
    bins = np.stack(cut_bin)
    src = np.stack(cut_src) if source is not None else bins.copy()
    return PatchBatch(src, prov, binary=bins, keypoints=kept)


# ---------------------------------------------------------------------------
# descriptor dump


def write_descriptors(path: str | Path, desc: np.ndarray) -> None:
    """Write ``SGHD`` binary: magic, u32 count, u32 dim, row-major float32."""
    desc = np.ascontiguousarray(desc, dtype="<f4")
    if desc.ndim != 2:
        raise ValueError("descriptors must be a 2-D array")
    with open(path, "wb") as fh:
        fh.write(DESCRIPTOR_MAGIC)
        fh.write(struct.pack("<II", *desc.shape))
        fh.write(desc.tobytes())


def read_descriptors(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != DESCRIPTOR_MAGIC:
            raise ValueError(f"{path}: not an SGHD descriptor file")
        count, dim = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(4 * count * dim), dtype="<f4")
    if data.size != count * dim:
        raise ValueError(f"{path}: truncated descriptor file")
    return data.reshape(count, dim).astype(np.float32)
