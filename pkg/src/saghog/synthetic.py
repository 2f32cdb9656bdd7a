"""Synthetic handwriting pages with writer-specific stroke styles.

Each writer owns a small alphabet of smooth random glyphs plus global style
parameters (slant, letter size, stroke width, spacing, baseline wobble).
Pages are rendered as light sheets with dark ink; the sheet tint and
illumination vary per page, not per writer.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage


@dataclass
class WriterStyle:
    writer_id: str
    glyphs: list[np.ndarray]
    slant: float
    height: float
    width_ratio: float
    stroke: int
    spacing: float
    line_gap: float
    wobble: float
    jitter: float
    ink: int


def _catmull_rom(points: np.ndarray, samples: int = 8) -> np.ndarray:
    p = np.vstack([points[:1], points, points[-1:]])
    t = np.linspace(0, 1, samples, endpoint=False)[:, None]
    out = []
    for i in range(1, len(p) - 2):
        p0, p1, p2, p3 = p[i - 1], p[i], p[i + 1], p[i + 2]
        out.append(0.5 * ((2 * p1) + (-p0 + p2) * t + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t**2
                          + (-p0 + 3 * p1 - 3 * p2 + p3) * t**3))
    out.append(points[-1:])
    return np.vstack(out)


def make_writer(writer_id: str, rng: np.random.Generator, n_glyphs: int = 12) -> WriterStyle:
    roundness = rng.uniform(0.0, 1.0)
    glyphs = []
    for _ in range(n_glyphs):
        n = int(rng.integers(3, 7))
        if rng.random() < roundness:
            # loopy glyph: points around an ellipse with writer-dependent sweep
            a0 = rng.uniform(0, 2 * np.pi)
            ang = a0 + np.cumsum(rng.uniform(0.6, 1.6, n))
            pts = np.stack([0.5 + 0.45 * np.cos(ang), 0.5 + 0.45 * np.sin(ang)], 1)
        else:
            # angular glyph: zigzag of up/down strokes
            xs = np.sort(rng.uniform(0, 1, n))
            ys = np.where(np.arange(n) % 2 == 0, rng.uniform(0.0, 0.3, n), rng.uniform(0.7, 1.0, n))
            pts = np.stack([xs, ys], 1)
        if rng.random() < 0.3:
            # ascender/descender
            k = int(rng.integers(0, n))
            pts[k, 1] += rng.choice([-0.9, 0.9])
        glyphs.append(pts)
    return WriterStyle(
        writer_id=writer_id,
        glyphs=glyphs,
        slant=float(rng.uniform(-0.6, 0.6)),
        height=float(rng.uniform(7.0, 14.0)),
        width_ratio=float(rng.uniform(0.5, 1.3)),
        stroke=int(rng.integers(1, 4)),
        spacing=float(rng.uniform(0.05, 0.5)),
        line_gap=float(rng.uniform(1.8, 2.6)),
        wobble=float(rng.uniform(0.0, 2.0)),
        jitter=float(rng.uniform(0.02, 0.08)),
        ink=int(rng.integers(10, 70)),
    )


def render_page(
    style: WriterStyle,
    rng: np.random.Generator,
    size: tuple[int, int] = (256, 256),
    color: bool = True,
    margin: int = 8,
) -> np.ndarray:
    """Render one page of pseudo-text in the writer's style."""
    h, w = size
    canvas = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(canvas)
    xh = style.height
    gw = xh * style.width_ratio
    y = margin + xh * 1.2
    while y < h - margin - 0.3 * xh:
        x = margin + rng.uniform(0, 2 * xh)
        while x < w - margin - gw:
            word_len = int(rng.integers(2, 7))
            for _ in range(word_len):
                if x >= w - margin - gw:
                    break
                g = style.glyphs[int(rng.integers(len(style.glyphs)))]
                pts = g + rng.normal(0, style.jitter, g.shape)
                curve = _catmull_rom(pts)
                base = y + style.wobble * np.sin(x / 23.0)
                px = x + curve[:, 0] * gw - style.slant * (1 - curve[:, 1]) * xh
                py = base - curve[:, 1] * xh
                draw.line(list(zip(px.tolist(), py.tolist())), fill=255, width=style.stroke, joint="curve")
                x += gw * (1.0 + style.spacing)
            x += gw * rng.uniform(0.8, 1.6)
        y += xh * style.line_gap
    ink = ndimage.gaussian_filter(np.asarray(canvas, dtype=np.float64) / 255.0, 0.6)
    ink = np.clip(ink * 1.4, 0, 1)

    yy, xx = np.mgrid[:h, :w]
    sheet = 215 + 20 * (xx / w - 0.5) * rng.uniform(-1, 1) + 20 * (yy / h - 0.5) * rng.uniform(-1, 1)
    sheet = sheet + rng.normal(0, 4, (h, w))
    gray = sheet * (1 - ink) + style.ink * ink
    gray = np.clip(gray, 0, 255)
    if not color:
        return np.rint(gray).astype(np.uint8)
    # sheet tint is drawn per page so color carries no writer identity
    tint = rng.uniform(0.85, 1.0, 3)
    rgb = np.stack([gray * t for t in tint], axis=-1)
    return np.rint(np.clip(rgb, 0, 255)).astype(np.uint8)


def make_corpus(
    n_writers: int,
    pages_per_writer: int,
    seed: int,
    size: tuple[int, int] = (256, 256),
    color: bool = True,
    prefix: str = "w",
) -> list[tuple[str, str, np.ndarray]]:
    """Return ``(page_id, writer_id, image)`` triples; fully determined by ``seed``."""
    root = np.random.default_rng(seed)
    out = []
    for wi in range(n_writers):
        wrng = np.random.default_rng(root.integers(2**63))
        style = make_writer(f"{prefix}{wi:03d}", wrng)
        for pi in range(pages_per_writer):
            img = render_page(style, wrng, size=size, color=color)
            out.append((f"{style.writer_id}_p{pi}", style.writer_id, img))
    return out


def write_corpus(root: str | Path, corpus) -> Path:
    """Write a corpus as ``root/<writer>/<page>.png`` plus ``index.csv``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = ["page_id,writer_id,path"]
    for page_id, writer_id, img in corpus:
        d = root / writer_id
        d.mkdir(exist_ok=True)
        rel = f"{writer_id}/{page_id}.png"
        Image.fromarray(img).save(root / rel)
        lines.append(f"{page_id},{writer_id},{rel}")
    (root / "index.csv").write_text("\n".join(lines) + "\n")
    return root
