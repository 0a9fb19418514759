"""Contextual mask: query regions left unexplained by the aligned host."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, InvalidParams
from .imagecore import RasterImage, save_image, to_grayscale


class MaskVerdict(str, enum.Enum):
    COMPOSITE = "composite"
    NEAR_DUPLICATE = "near_duplicate"
    UNRELATED = "unrelated"


@dataclass(frozen=True)
class MaskParams:
    levels: int = 32
    diff_threshold: int = 24
    open_size: int = 5
    median_size: int = 5
    min_area: int = 64


@dataclass(frozen=True)
class VerdictThresholds:
    coverage_high: float = 0.9
    coverage_low: float = 0.005
    # mean descriptor distance of the registration matches
    max_match_distance: float = 0.18
    min_inliers: int = 8


@dataclass(frozen=True)
class Component:
    x0: int
    y0: int
    x1: int  # exclusive
    y1: int  # exclusive
    area: int
    label: int = 0

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True, eq=False)
class ContextMask:
    width: int
    height: int
    bits: np.ndarray
    coverage: float
    components: tuple[Component, ...] = ()
    labels: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def empty(cls, width: int, height: int) -> ContextMask:
        bits = np.zeros((height, width), dtype=bool)
        return cls(width, height, bits, 0.0, (), np.zeros((height, width), dtype=np.int32))

    def component_bits(self, i: int) -> np.ndarray:
        """Boolean map of the i-th component (components are area-sorted)."""
        return self.labels == self.components[i].label

    def to_image(self) -> RasterImage:
        return RasterImage(np.where(self.bits, 255, 0).astype(np.uint8)[..., None])

    def save_png(self, out_dir, query_id: str) -> Path:
        path = Path(out_dir) / f"{query_id}.mask.png"
        save_image(self.to_image(), path)
        return path

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "coverage": self.coverage,
            "components": [
                {"bbox": list(c.bbox), "area": c.area} for c in self.components
            ],
        }


def quantize_colors(img: RasterImage, levels: int = 32) -> RasterImage:
    if levels < 2:
        raise InvalidParams("levels must be >= 2")
    if levels >= 256:
        return img
    width = 256.0 / levels
    q = np.floor(img.pixels / width) * width + width / 2.0
    return RasterImage(np.floor(q).astype(np.uint8))


_EIGHT = np.ones((3, 3), dtype=bool)


def from_bits(bits: np.ndarray, min_area: int = 0) -> ContextMask:
    """Label 8-connected components, drop small ones and summarise."""
    bits = np.asarray(bits, dtype=bool)
    h, w = bits.shape
    labels, n = ndimage.label(bits, structure=_EIGHT)
    if n == 0:
        return ContextMask(w, h, bits.copy(), 0.0, (), labels.astype(np.int32))
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    keep = areas >= max(min_area, 1)
    keep[0] = False
    labels = np.where(keep[labels], labels, 0).astype(np.int32)
    bits = labels > 0
    comps = []
    for lab, sl in enumerate(ndimage.find_objects(labels), 1):
        if sl is None or not keep[lab]:
            continue
        comps.append(Component(sl[1].start, sl[0].start, sl[1].stop, sl[0].stop, int(areas[lab]), lab))
    comps.sort(key=lambda c: (-c.area, c.y0, c.x0))
    coverage = float(np.count_nonzero(bits)) / float(w * h)
    return ContextMask(w, h, bits, coverage, tuple(comps), labels)


def difference_map(query: RasterImage, host_aligned: RasterImage, levels: int = 32) -> np.ndarray:
    """Max-over-channels absolute difference of the quantised images."""
    if query.channels != host_aligned.channels:
        # compare on luma when channel counts disagree
        query, host_aligned = to_grayscale(query), to_grayscale(host_aligned)
    a = quantize_colors(query, levels).pixels.astype(np.int16)
    b = quantize_colors(host_aligned, levels).pixels.astype(np.int16)
    return np.abs(a - b).max(axis=-1)


def compute_mask(
    query: RasterImage,
    host_aligned: RasterImage,
    validity: np.ndarray | None = None,
    params: MaskParams | None = None,
) -> ContextMask:
    params = params or MaskParams()
    if (query.height, query.width) != (host_aligned.height, host_aligned.width):
        raise DimensionMismatch(
            f"query {query.width}x{query.height} vs host {host_aligned.width}x{host_aligned.height}"
        )
    fg = difference_map(query, host_aligned, params.levels) > params.diff_threshold
    if validity is not None:
        validity = np.asarray(validity, dtype=bool)
        if validity.shape != fg.shape:
            raise DimensionMismatch("validity map does not match the query size")
        fg &= validity
    se = np.ones((params.open_size, params.open_size), dtype=bool)
    # padding with foreground keeps blobs touching the border from being eroded away
    fg = ndimage.binary_erosion(fg, se, border_value=1)
    fg = ndimage.binary_dilation(fg, se)
    fg = ndimage.median_filter(fg.astype(np.uint8), size=params.median_size, mode="nearest") > 0
    return from_bits(fg, params.min_area)


def classify_mask(
    mask: ContextMask | None,
    match_quality: float | None,
    thresholds: VerdictThresholds | None = None,
    *,
    registration_ok: bool = True,
    inlier_count: int | None = None,
) -> MaskVerdict:
    t = thresholds or VerdictThresholds()
    if not registration_ok or mask is None:
        return MaskVerdict.UNRELATED
    if match_quality is None or not np.isfinite(match_quality) or match_quality > t.max_match_distance:
        return MaskVerdict.UNRELATED
    if inlier_count is not None and inlier_count < t.min_inliers:
        return MaskVerdict.UNRELATED
    if mask.coverage > t.coverage_high or mask.coverage < t.coverage_low:
        return MaskVerdict.NEAR_DUPLICATE
    return MaskVerdict.COMPOSITE
