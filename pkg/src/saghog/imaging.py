"""Pixel-level operations: grayscale, binarization, morphology, edges, crops.

Conventions used throughout the package:

* gray images are ``uint8`` arrays of shape ``(H, W)``;
* binary images are ``bool`` arrays of shape ``(H, W)`` with ``True`` = ink;
* color images are ``uint8`` arrays of shape ``(H, W, 3)``.
"""

from __future__ import annotations

from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

__all__ = [
    "to_gray",
    "otsu_threshold",
    "binarize_otsu",
    "binarize_sauvola",
    "binarize",
    "morph",
    "edge_map",
    "random_crop",
    "read_image",
    "read_mask",
    "write_binary",
    "write_image",
]


def to_gray(image: np.ndarray) -> np.ndarray:
    """Convert a 1- or 3-channel image to ``uint8`` luma.

    Weights are 0.299/0.587/0.114 and the result is rounded half up, done in
    integer arithmetic so the output is exact.
    """
    img = np.asarray(image)
    if img.size == 0:
        raise ValueError("cannot convert an empty image")
    if img.ndim == 2:
        return img.astype(np.uint8, copy=True)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected 1 or 3 channels, got shape {img.shape}")
    if img.shape[2] == 1:
        return img[..., 0].astype(np.uint8, copy=True)
    c = img.astype(np.int64)
    y = (299 * c[..., 0] + 587 * c[..., 1] + 114 * c[..., 2] + 500) // 1000
    return y.astype(np.uint8)


def otsu_threshold(hist: np.ndarray) -> int | None:
    """Otsu threshold of a 256-bin histogram.

    Returns ``t`` such that values ``< t`` form the dark class, maximizing the
    between-class variance. Ties go to the smallest ``t``. ``None`` is
    returned when no split has positive variance (at most one occupied bin).

    The comparison is carried out on exact rationals: the between-class
    variance is proportional to ``(N*S0 - n0*S)**2 / (n0*n1)``.
    """
    h = [int(v) for v in np.asarray(hist).ravel()]
    if len(h) != 256:
        raise ValueError("histogram must have 256 bins")
    total = sum(h)
    total_sum = sum(i * v for i, v in enumerate(h))
    best_t, best = None, Fraction(0)
    n0 = s0 = 0
    for t in range(1, 256):
        n0 += h[t - 1]
        s0 += (t - 1) * h[t - 1]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        score = Fraction((total * s0 - n0 * total_sum) ** 2, n0 * n1)
        if score > best:
            best_t, best = t, score
    return best_t


def binarize_otsu(img: np.ndarray) -> np.ndarray:
    gray = np.asarray(img, dtype=np.uint8)
    t = otsu_threshold(np.bincount(gray.ravel(), minlength=256))
    if t is None:
        return np.zeros(gray.shape, dtype=bool)
    return gray < t


def _box_stats(values: np.ndarray, wh: int, ww: int) -> tuple[np.ndarray, np.ndarray]:
    """Windowed mean and variance with edge-replicated borders, via integral images."""
    rh, rw = wh // 2, ww // 2
    padded = np.pad(values.astype(np.float64), ((rh, rh), (rw, rw)), mode="edge")
    h, w = values.shape
    n = float(wh * ww)

    def window_sum(a: np.ndarray) -> np.ndarray:
        ii = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
        ii[1:, 1:] = a.cumsum(0).cumsum(1)
        return ii[wh:wh + h, ww:ww + w] - ii[:h, ww:ww + w] - ii[wh:wh + h, :w] + ii[:h, :w]

    mean = window_sum(padded) / n
    var = window_sum(padded * padded) / n - mean * mean
    return mean, np.maximum(var, 0.0)


def binarize_sauvola(img: np.ndarray, window: int = 25, k: float = 0.2, r: float = 128.0) -> np.ndarray:
    """Sauvola local thresholding; ink where ``I < m * (1 + k * (s / r - 1))``."""
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    gray = np.asarray(img)
    h, w = gray.shape
    # clamp to the largest odd extent that fits
    wh = min(window, h if h % 2 else h - 1)
    ww = min(window, w if w % 2 else w - 1)
    mean, var = _box_stats(gray, wh, ww)
    thresh = mean * (1.0 + k * (np.sqrt(var) / r - 1.0))
    return gray < thresh


def binarize(img: np.ndarray, method: str = "sauvola", **kwargs) -> np.ndarray:
    if method == "sauvola":
        return binarize_sauvola(img, **kwargs)
    if method == "otsu":
        return binarize_otsu(img)
    raise ValueError(f"unknown binarization method {method!r}")


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[y, x] = img[y - dy, x - dx]; out-of-bounds reads are False."""
    h, w = img.shape
    out = np.zeros_like(img)
    ys, yd = slice(max(0, -dy), min(h, h - dy)), slice(max(0, dy), min(h, h + dy))
    xs, xd = slice(max(0, -dx), min(w, w - dx)), slice(max(0, dx), min(w, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def morph(img: np.ndarray, kernel: np.ndarray, mode: str) -> np.ndarray:
    """Binary dilation/erosion with a 3x3 structuring element.

    ``dilate(A, K)[p] = any(A[p - k])`` and ``erode(A, K)[p] = all(A[p + k])``
    for offsets ``k`` where the kernel is set; pixels outside the image are
    background.
    """
    kernel = np.asarray(kernel, dtype=bool)
    if kernel.shape != (3, 3) or not kernel.any():
        raise ValueError("kernel must be a 3x3 mask with at least one set cell")
    img = np.asarray(img, dtype=bool)
    offsets = [(dy - 1, dx - 1) for dy, dx in zip(*np.nonzero(kernel))]
    if mode == "dilate":
        out = np.zeros_like(img)
        for dy, dx in offsets:
            out |= _shift(img, dy, dx)
    elif mode == "erode":
        out = np.ones_like(img)
        for dy, dx in offsets:
            out &= _shift(img, -dy, -dx)
    else:
        raise ValueError(f"mode must be 'erode' or 'dilate', got {mode!r}")
    return out


def _gaussian_kernel(size: int = 5, sigma: float = 1.4) -> np.ndarray:
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)


def edge_map(img: np.ndarray, low: float = 50.0, high: float = 150.0) -> np.ndarray:
    """Canny edges: 5x5 Gaussian (sigma 1.4), Sobel, NMS, hysteresis."""
    if low > high:
        raise ValueError("low threshold must not exceed high threshold")
    f = ndimage.convolve(np.asarray(img, dtype=np.float64), _gaussian_kernel(), mode="nearest")
    gx = ndimage.correlate(f, _SOBEL_X, mode="nearest")
    gy = ndimage.correlate(f, _SOBEL_X.T, mode="nearest")
    mag = np.hypot(gx, gy)

    # quantize direction to 0/45/90/135 degrees
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = (np.floor((angle + 22.5) / 45.0).astype(int)) % 4
    p = np.pad(mag, 1, mode="constant")
    h, w = mag.shape
    neighbours = {
        0: ((0, -1), (0, 1)),
        1: ((-1, -1), (1, 1)),
        2: ((-1, 0), (1, 0)),
        3: ((-1, 1), (1, -1)),
    }
    keep = np.zeros_like(mag, dtype=bool)
    for s, ((ay, ax), (by, bx)) in neighbours.items():
        a = p[1 + ay:1 + ay + h, 1 + ax:1 + ax + w]
        b = p[1 + by:1 + by + h, 1 + bx:1 + bx + w]
        # strict on one side so plateaus of two equal pixels yield a 1-px line
        keep |= (sector == s) & (mag > a) & (mag >= b)
    nms = np.where(keep, mag, 0.0)

    strong = nms >= high
    weak = nms >= low
    if not strong.any():
        return np.zeros(mag.shape, dtype=bool)
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    connected = np.zeros(n + 1, dtype=bool)
    connected[np.unique(labels[strong])] = True
    connected[0] = False
    return connected[labels]


def random_crop(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly placed ``size x size`` crop; smaller inputs are reflect-padded first."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    if h < size or w < size:
        pad = [(0, max(0, size - h)), (0, max(0, size - w))] + [(0, 0)] * (img.ndim - 2)
        img = np.pad(img, pad, mode="symmetric")
        h, w = img.shape[:2]
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return img[y:y + size, x:x + size].copy()


def read_image(path: str | Path) -> np.ndarray:
    """Load PNG/PGM/JPEG as ``uint8``; gray stays 2-D, everything else becomes RGB."""
    with Image.open(path) as im:
        if im.mode in ("L", "1", "I;16", "I", "F"):
            return np.asarray(im.convert("L"))
        return np.asarray(im.convert("RGB"))


def read_mask(path: str | Path) -> np.ndarray:
    """Segmentation masks: any nonzero pixel is part of the region."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def write_binary(path: str | Path, img: np.ndarray) -> None:
    """Write a binary image as PNG, ink black on white."""
    out = np.where(np.asarray(img, dtype=bool), 0, 255).astype(np.uint8)
    Image.fromarray(out, mode="L").save(path)


def write_image(path: str | Path, img: np.ndarray) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    """Write a region mask as PNG, region white (255) on black."""
    out = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(out, mode="L").save(path)


def crop_in_region(img: np.ndarray, region: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Crop centred on a random region pixel; pixels outside the region become white background."""
    img = np.asarray(img)
    region = np.asarray(region, dtype=bool)
    if region.shape != img.shape[:2]:
        raise ValueError("region mask must match the image size")
    ys, xs = np.nonzero(region)
    if len(ys) == 0:
        return random_crop(img, size, rng)
    i = int(rng.integers(len(ys)))
    cleaned = img.copy()
    cleaned[~region] = 255
    h, w = img.shape[:2]
    y0 = int(np.clip(ys[i] - size // 2, 0, max(0, h - size)))
    x0 = int(np.clip(xs[i] - size // 2, 0, max(0, w - size)))
    out = cleaned[y0:y0 + size, x0:x0 + size]
    if out.shape[0] < size or out.shape[1] < size:
        pad = [(0, size - out.shape[0]), (0, size - out.shape[1])] + [(0, 0)] * (img.ndim - 2)
        out = np.pad(out, pad, constant_values=255)
    return out.copy()
