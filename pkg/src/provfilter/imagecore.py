"""Raster images, grayscale conversion and summed-area tables."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError, ImageIOError

__all__ = [
    "RasterImage",
    "IntegralImage",
    "load_image",
    "save_image",
    "jpeg_roundtrip",
    "to_grayscale",
    "integral",
    "box_sum",
]


@dataclass(frozen=True, eq=False)
class RasterImage:
    """An 8-bit image stored as a ``(height, width, channels)`` uint8 array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"expected HxWx1 or HxWx3 pixels, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if px.dtype != np.uint8:
            px = np.clip(np.rint(px), 0, 255).astype(np.uint8)
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def gray(self) -> np.ndarray:
        """2-D view of a single-channel image."""
        if self.channels != 1:
            raise ValueError("image is not single-channel")
        return self.pixels[:, :, 0]

    def __eq__(self, other):
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


def _from_pil(im: Image.Image) -> RasterImage:
    if im.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(im, dtype=np.float64)
        top = 65535.0 if arr.max() > 255 or im.mode.startswith("I;16") else 255.0
        return RasterImage(np.rint(arr * (255.0 / top)))
    if im.mode == "F":
        return RasterImage(np.asarray(im, dtype=np.float64))
    if im.mode in ("L", "1"):
        return RasterImage(np.asarray(im.convert("L")))
    # palette, RGBA, CMYK, LA ... -> alpha dropped
    return RasterImage(np.asarray(im.convert("RGB")))


def load_image(path) -> RasterImage:
    """Decode a PNG, JPEG or PPM file. 16-bit sources are rescaled to [0, 255]."""
    path = Path(path)
    if not path.is_file():
        raise ImageIOError(f"no such image file: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            return _from_pil(im)
    except (UnidentifiedImageError, SyntaxError, OSError, ValueError) as exc:
        if isinstance(exc, OSError) and not path.exists():
            raise ImageIOError(str(exc)) from exc
        raise FormatError(f"cannot decode {path}: {exc}") from exc


def save_image(img: RasterImage, path, quality: int | None = None) -> None:
    """Encode by file suffix; ``quality`` applies to JPEG only."""
    path = Path(path)
    px = img.pixels[:, :, 0] if img.channels == 1 else img.pixels
    im = Image.fromarray(px)
    kwargs = {}
    if path.suffix.lower() in (".jpg", ".jpeg"):
        kwargs["quality"] = 90 if quality is None else int(quality)
    try:
        im.save(path, **kwargs)
    except OSError as exc:
        raise ImageIOError(str(exc)) from exc


def jpeg_roundtrip(img: RasterImage, quality: int) -> RasterImage:
    """Encode to JPEG in memory and decode again."""
    px = img.pixels[:, :, 0] if img.channels == 1 else img.pixels
    buf = io.BytesIO()
    Image.fromarray(px).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as im:
        im.load()
        return _from_pil(im)


def to_grayscale(img: RasterImage) -> RasterImage:
    if img.channels == 1:
        return img
    rgb = img.pixels.astype(np.float64)
    gray = 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
    # round half up; np.rint would send 0.5 to the even neighbour
    return RasterImage(np.floor(gray + 0.5))


@dataclass(frozen=True, eq=False)
class IntegralImage:
    """Summed-area table with a leading zero row and column (int64)."""

    table: np.ndarray

    @property
    def height(self) -> int:
        return self.table.shape[0] - 1

    @property
    def width(self) -> int:
        return self.table.shape[1] - 1


def integral(img: RasterImage) -> IntegralImage:
    if img.channels != 1:
        raise ValueError("integral image needs a single-channel input")
    h, w = img.height, img.width
    table = np.zeros((h + 1, w + 1), dtype=np.int64)
    np.cumsum(np.cumsum(img.gray, axis=0, dtype=np.int64), axis=1, out=table[1:, 1:])
    table.setflags(write=False)
    return IntegralImage(table)


def box_sum(ii: IntegralImage, rect) -> int:
    """Exact pixel sum over ``rect = (x0, y0, x1, y1)``, end-exclusive, clipped."""
    x0, y0, x1, y1 = (int(v) for v in rect)
    x0 = min(max(x0, 0), ii.width)
    x1 = min(max(x1, 0), ii.width)
    y0 = min(max(y0, 0), ii.height)
    y1 = min(max(y1, 0), ii.height)
    if x1 <= x0 or y1 <= y0:
        return 0
    t = ii.table
    return int(t[y1, x1] - t[y0, x1] - t[y1, x0] + t[y0, x0])
