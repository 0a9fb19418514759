"""Procedural base images for building synthetic provenance corpora.

Each image is a smooth random colour field overlaid with a few dozen
random shapes and strokes plus a fine noise texture, which yields plenty of
blob- and corner-like structure for the detector and descriptors that are
distinctive between images.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

from ..imagecore import RasterImage, save_image


def _colour(rng) -> tuple[int, int, int]:
    return tuple(int(v) for v in rng.integers(0, 256, size=3))


def _smooth_field(rng, width: int, height: int, cells: int) -> np.ndarray:
    coarse = rng.uniform(0, 255, size=(cells, cells, 3)).astype(np.uint8)
    im = Image.fromarray(coarse).resize((width, height), Image.BICUBIC)
    return np.asarray(im, dtype=np.float64)


def synth_image(seed: int, width: int = 256, height: int = 256) -> RasterImage:
    rng = np.random.default_rng(seed)
    base = _smooth_field(rng, width, height, int(rng.integers(2, 6)))
    im = Image.fromarray(base.astype(np.uint8))
    draw = ImageDraw.Draw(im)
    n_shapes = int(rng.integers(25, 45))
    for _ in range(n_shapes):
        kind = rng.integers(0, 4)
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        r = rng.uniform(4, max(width, height) / 6)
        fill = _colour(rng)
        if kind == 0:
            w, h = r * rng.uniform(0.5, 1.5), r * rng.uniform(0.5, 1.5)
            draw.rectangle([cx - w, cy - h, cx + w, cy + h], fill=fill)
        elif kind == 1:
            w, h = r * rng.uniform(0.5, 1.5), r * rng.uniform(0.5, 1.5)
            draw.ellipse([cx - w, cy - h, cx + w, cy + h], fill=fill)
        elif kind == 2:
            k = int(rng.integers(3, 7))
            ang = np.sort(rng.uniform(0, 2 * np.pi, size=k))
            rad = r * rng.uniform(0.4, 1.2, size=k)
            pts = [(float(cx + a * np.cos(t)), float(cy + a * np.sin(t))) for a, t in zip(rad, ang)]
            draw.polygon(pts, fill=fill)
        else:
            pts = [(float(p), float(q)) for p, q in rng.uniform(0, [width, height], size=(int(rng.integers(2, 5)), 2))]
            draw.line(pts, fill=fill, width=int(rng.integers(1, 5)))
    area_scale = (width * height) / 65536.0
    for _ in range(int(rng.integers(120, 220) * area_scale)):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        r = rng.uniform(1.5, 6)
        if rng.random() < 0.5:
            draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=_colour(rng))
        else:
            draw.rectangle([cx - r, cy - r * rng.uniform(0.3, 1.5), cx + r, cy + r], fill=_colour(rng))
    im = im.filter(ImageFilter.GaussianBlur(radius=0.7))
    arr = np.asarray(im, dtype=np.float64)
    # low-amplitude texture so flat regions are not perfectly flat
    tex = _smooth_field(rng, width, height, max(width, height) // 4) - 127.5
    arr = arr + 0.08 * tex
    return RasterImage(np.clip(np.rint(arr), 0, 255))


def synth_base_images(out_dir, count: int, seed: int = 0, width: int = 256, height: int = 256) -> list[Path]:
    """Write ``count`` procedural PNG images ``base_00000.png`` ... into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).generate_state(count)
    paths = []
    for i, s in enumerate(seeds):
        path = out_dir / f"base_{i:05d}.png"
        save_image(synth_image(int(s), width, height), path)
        paths.append(path)
    return paths
