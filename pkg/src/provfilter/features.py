"""Hessian-determinant interest points with 64-d oriented Haar descriptors.

A SURF-style detector: box-filter approximations of the second-order
Gaussian derivatives are evaluated on the integral image over a small
octave/interval pyramid, extrema of det(H) are localised in (x, y, scale),
assigned a dominant Haar-wavelet orientation and described by a 4x4 grid
of (sum dx, sum dy, sum |dx|, sum |dy|) statistics.  Everything is
vectorised over keypoints; no per-pixel Python loops.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, FormatError
from .imagecore import RasterImage, integral, to_grayscale

__all__ = [
    "DESCRIPTOR_DIM",
    "DetectorConfig",
    "Keypoint",
    "FeatureSet",
    "detect_and_describe",
    "redetect_in_regions",
    "keypoints_in_mask",
    "write_feature_set",
    "read_feature_set",
    "dumps_feature_set",
    "loads_feature_set",
]

DESCRIPTOR_DIM = 64
MIN_SIDE = 32
SMALL_SCALE_BUDGET = 2000
LARGE_SCALE_BUDGET = 500

_PFFS_MAGIC = b"PFFS"
_PFFS_VERSION = 1


@dataclass(frozen=True)
class DetectorConfig:
    hessian_threshold: float = 2e-4
    octaves: int = 3
    intervals: int = 4
    init_step: int = 1
    # lowered-threshold factor used by redetect_in_regions
    region_threshold_factor: float = 0.25


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float
    orientation: float
    response: float


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Parallel keypoint / descriptor arrays for one image.

    ``kp`` is ``(n, 5)`` float32 with columns x, y, scale, orientation,
    response; ``descriptors`` is ``(n, 64)`` float32, rows unit-norm.
    ``size`` is the (width, height) of the source image when known.
    """

    image_id: str
    kp: np.ndarray
    descriptors: np.ndarray
    size: tuple[int, int] | None = field(default=None, compare=False)

    def __post_init__(self):
        kp = np.ascontiguousarray(np.asarray(self.kp, dtype=np.float32).reshape(-1, 5))
        desc = np.ascontiguousarray(
            np.asarray(self.descriptors, dtype=np.float32).reshape(-1, DESCRIPTOR_DIM)
        )
        if len(kp) != len(desc):
            raise ValueError("keypoints and descriptors differ in length")
        kp.setflags(write=False)
        desc.setflags(write=False)
        object.__setattr__(self, "kp", kp)
        object.__setattr__(self, "descriptors", desc)

    def __len__(self) -> int:
        return len(self.kp)

    @property
    def xy(self) -> np.ndarray:
        return self.kp[:, :2]

    @property
    def keypoints(self) -> list[Keypoint]:
        return [Keypoint(*map(float, row)) for row in self.kp]

    def subset(self, idx) -> FeatureSet:
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureSet(self.image_id, self.kp[idx], self.descriptors[idx], self.size)

    def __eq__(self, other):
        if not isinstance(other, FeatureSet):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and np.array_equal(self.kp, other.kp)
            and np.array_equal(self.descriptors, other.descriptors)
        )

    __hash__ = None

    @classmethod
    def empty(cls, image_id: str = "", size=None) -> FeatureSet:
        return cls(image_id, np.zeros((0, 5), np.float32), np.zeros((0, DESCRIPTOR_DIM), np.float32), size)


# ---------------------------------------------------------------------------
# box filters on the integral image


def _box(t: np.ndarray, r0, c0, nr, nc):
    """Vectorised clipped box sum; ``t`` is a padded (H+1, W+1) table."""
    h = t.shape[0] - 1
    w = t.shape[1] - 1
    r1 = np.clip(r0 + nr, 0, h)
    c1 = np.clip(c0 + nc, 0, w)
    r0 = np.clip(r0, 0, h)
    c0 = np.clip(c0, 0, w)
    return t[r1, c1] - t[r0, c1] - t[r1, c0] + t[r0, c0]


def _haar_x(t, r, c, size):
    half = size // 2
    return _box(t, r - half, c, size, half) - _box(t, r - half, c - half, size, half)


def _haar_y(t, r, c, size):
    half = size // 2
    return _box(t, r, c - half, half, size) - _box(t, r - half, c - half, half, size)


def _grid_box(t, r0, c0, nr, nc):
    """Box sums on the outer grid ``r0 x c0`` (1-D index vectors)."""
    h = t.shape[0] - 1
    w = t.shape[1] - 1
    r1 = np.clip(r0 + nr, 0, h)[:, None]
    c1 = np.clip(c0 + nc, 0, w)[None, :]
    r0 = np.clip(r0, 0, h)[:, None]
    c0 = np.clip(c0, 0, w)[None, :]
    return t[r1, c1] - t[r0, c1] - t[r1, c0] + t[r0, c0]


def _hessian_layer(t, rows, cols, size):
    b = (size - 1) // 2
    lobe = size // 3
    r = rows
    c = cols
    dxx = _grid_box(t, r - lobe + 1, c - b, 2 * lobe - 1, size) - 3.0 * _grid_box(
        t, r - lobe + 1, c - lobe // 2, 2 * lobe - 1, lobe
    )
    dyy = _grid_box(t, r - b, c - lobe + 1, size, 2 * lobe - 1) - 3.0 * _grid_box(
        t, r - lobe // 2, c - lobe + 1, lobe, 2 * lobe - 1
    )
    dxy = (
        _grid_box(t, r - lobe, c + 1, lobe, lobe)
        + _grid_box(t, r + 1, c - lobe, lobe, lobe)
        - _grid_box(t, r - lobe, c - lobe, lobe, lobe)
        - _grid_box(t, r + 1, c + 1, lobe, lobe)
    )
    inv_area = 1.0 / (size * size)
    dxx *= inv_area
    dyy *= inv_area
    dxy *= inv_area
    return dxx * dyy - 0.81 * dxy * dxy


def _filter_sizes(octave: int, intervals: int) -> list[int]:
    return [3 * ((2 ** (octave + 1)) * (i + 1) + 1) for i in range(intervals)]


def _candidates(t: np.ndarray, cfg: DetectorConfig, threshold: float) -> np.ndarray:
    """Localised extrema as rows (x, y, scale, response), unsorted."""
    h = t.shape[0] - 1
    w = t.shape[1] - 1
    found = []
    for o in range(cfg.octaves):
        step = cfg.init_step * 2**o
        sizes = _filter_sizes(o, cfg.intervals)
        rows = np.arange(0, h, step)
        cols = np.arange(0, w, step)
        if len(rows) < 3 or len(cols) < 3:
            break
        stack = np.stack([_hessian_layer(t, rows, cols, s) for s in sizes])
        peak = ndimage.maximum_filter(stack, size=3, mode="constant", cval=-np.inf)
        is_max = (stack == peak) & (stack > threshold)
        is_max[0] = False
        is_max[-1] = False
        for i in range(1, cfg.intervals - 1):
            margin = sizes[i + 1] // 2 + 1
            ri, ci = np.nonzero(is_max[i])
            keep = (
                (rows[ri] - margin >= 0)
                & (rows[ri] + margin < h)
                & (cols[ci] - margin >= 0)
                & (cols[ci] + margin < w)
                & (ri >= 1) & (ri < len(rows) - 1)
                & (ci >= 1) & (ci < len(cols) - 1)
            )
            ri, ci = ri[keep], ci[keep]
            if len(ri) == 0:
                continue
            ok, ox, oy, osc = _interpolate(stack, i, ri, ci)
            ri, ci, ox, oy, osc = ri[ok], ci[ok], ox[ok], oy[ok], osc[ok]
            x = (ci + ox) * step
            y = (ri + oy) * step
            scale = 0.1333 * (sizes[i] + osc * (sizes[i] - sizes[i - 1]))
            resp = stack[i, ri, ci]
            inside = (x >= 0) & (x < w) & (y >= 0) & (y < h) & (scale > 0)
            found.append(np.column_stack([x, y, scale, resp])[inside])
    if not found:
        return np.zeros((0, 4))
    return np.concatenate(found)


def _interpolate(stack, i, r, c):
    """Quadratic sub-sample refinement in (x, y, scale)."""
    v = stack
    cen = v[i, r, c]
    dx = (v[i, r, c + 1] - v[i, r, c - 1]) / 2
    dy = (v[i, r + 1, c] - v[i, r - 1, c]) / 2
    ds = (v[i + 1, r, c] - v[i - 1, r, c]) / 2
    dxx = v[i, r, c + 1] + v[i, r, c - 1] - 2 * cen
    dyy = v[i, r + 1, c] + v[i, r - 1, c] - 2 * cen
    dss = v[i + 1, r, c] + v[i - 1, r, c] - 2 * cen
    dxy = (v[i, r + 1, c + 1] - v[i, r + 1, c - 1] - v[i, r - 1, c + 1] + v[i, r - 1, c - 1]) / 4
    dxs = (v[i + 1, r, c + 1] - v[i + 1, r, c - 1] - v[i - 1, r, c + 1] + v[i - 1, r, c - 1]) / 4
    dys = (v[i + 1, r + 1, c] - v[i + 1, r - 1, c] - v[i - 1, r + 1, c] + v[i - 1, r - 1, c]) / 4
    hess = np.stack(
        [
            np.stack([dxx, dxy, dxs], -1),
            np.stack([dxy, dyy, dys], -1),
            np.stack([dxs, dys, dss], -1),
        ],
        -2,
    )
    grad = np.stack([dx, dy, ds], -1)
    det = np.linalg.det(hess)
    solvable = np.abs(det) > 1e-30
    off = np.zeros_like(grad)
    if solvable.any():
        off[solvable] = -np.linalg.solve(hess[solvable], grad[solvable][..., None])[..., 0]
    ok = solvable & np.all(np.abs(off) < 0.5, axis=1)
    return ok, off[:, 0], off[:, 1], off[:, 2]


# ---------------------------------------------------------------------------
# orientation and descriptor

_ORI_I, _ORI_J = np.meshgrid(np.arange(-6, 7), np.arange(-6, 7), indexing="ij")
_ORI_SEL = (_ORI_I**2 + _ORI_J**2) < 36
_ORI_I = _ORI_I[_ORI_SEL].astype(np.float64)
_ORI_J = _ORI_J[_ORI_SEL].astype(np.float64)
_ORI_W = np.exp(-(_ORI_I**2 + _ORI_J**2) / (2 * 2.0**2))
_WIN_START = np.arange(0.0, 2 * np.pi, 0.15)

_SAMPLE = np.arange(20) - 10 + 0.5
_DESC_U, _DESC_V = np.meshgrid(_SAMPLE, _SAMPLE, indexing="ij")
_DESC_U = _DESC_U.ravel()
_DESC_V = _DESC_V.ravel()
_DESC_W = np.exp(-(_DESC_U**2 + _DESC_V**2) / (2 * 3.3**2))
# sub-region index (0..15) of every 20x20 sample, u-major
_DESC_CELL = ((np.arange(20)[:, None] // 5) * 4 + (np.arange(20)[None, :] // 5)).ravel()


def _orientations(t, x, y, s):
    px = np.floor(x[:, None] + _ORI_I[None, :] * s[:, None] + 0.5).astype(np.int64)
    py = np.floor(y[:, None] + _ORI_J[None, :] * s[:, None] + 0.5).astype(np.int64)
    size = (4 * s)[:, None].astype(np.int64)
    rx = _haar_x(t, py, px, size) * _ORI_W
    ry = _haar_y(t, py, px, size) * _ORI_W
    ang = np.mod(np.arctan2(ry, rx), 2 * np.pi)
    rel = np.mod(ang[None, :, :] - _WIN_START[:, None, None], 2 * np.pi)
    inwin = rel < (np.pi / 3)
    sx = np.where(inwin, rx[None], 0.0).sum(-1)
    sy = np.where(inwin, ry[None], 0.0).sum(-1)
    best = np.argmax(sx * sx + sy * sy, axis=0)
    k = np.arange(len(x))
    return np.arctan2(sy[best, k], sx[best, k])


def _descriptors(t, x, y, s, ori):
    co = np.cos(ori)[:, None]
    si = np.sin(ori)[:, None]
    u = _DESC_U[None, :] * s[:, None]
    v = _DESC_V[None, :] * s[:, None]
    px = np.floor(x[:, None] + u * co - v * si + 0.5).astype(np.int64)
    py = np.floor(y[:, None] + u * si + v * co + 0.5).astype(np.int64)
    size = (2 * s)[:, None].astype(np.int64)
    dx = _haar_x(t, py, px, size)
    dy = _haar_y(t, py, px, size)
    rx = (co * dx + si * dy) * _DESC_W
    ry = (-si * dx + co * dy) * _DESC_W
    n = len(x)
    out = np.zeros((n, 16, 4))
    for cell in range(16):
        sel = _DESC_CELL == cell
        out[:, cell, 0] = rx[:, sel].sum(1)
        out[:, cell, 1] = ry[:, sel].sum(1)
        out[:, cell, 2] = np.abs(rx[:, sel]).sum(1)
        out[:, cell, 3] = np.abs(ry[:, sel]).sum(1)
    out = out.reshape(n, DESCRIPTOR_DIM)
    norm = np.linalg.norm(out, axis=1)
    return out, norm


def _order(cand: np.ndarray) -> np.ndarray:
    # descending response, ties by (y, x, scale) ascending
    return np.lexsort((cand[:, 2], cand[:, 0], cand[:, 1], -cand[:, 3]))


def _describe(t, cand: np.ndarray, budget: int, image_id: str, size) -> FeatureSet:
    cand = cand.astype(np.float32).astype(np.float64)
    cand = cand[_order(cand)][:budget]
    if len(cand) == 0:
        return FeatureSet.empty(image_id, size)
    x, y, scale, resp = cand.T
    s = np.maximum(np.floor(scale + 0.5), 1.0)
    ori = _orientations(t, x, y, s)
    desc, norm = _descriptors(t, x, y, s, ori)
    ok = norm > 1e-12
    desc = desc[ok] / norm[ok, None]
    kp = np.column_stack([x, y, scale, ori, resp])[ok]
    return FeatureSet(image_id, kp, desc, size)


def _normalised_table(img: RasterImage) -> np.ndarray:
    gray = to_grayscale(img)
    return integral(gray).table.astype(np.float64) / 255.0


def detect_and_describe(
    img: RasterImage,
    budget: int = SMALL_SCALE_BUDGET,
    *,
    image_id: str = "",
    config: DetectorConfig | None = None,
) -> FeatureSet:
    """Detect up to ``budget`` strongest interest points and describe them."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    cfg = config or DetectorConfig()
    size = (img.width, img.height)
    if img.width < MIN_SIDE or img.height < MIN_SIDE:
        return FeatureSet.empty(image_id, size)
    t = _normalised_table(img)
    cand = _candidates(t, cfg, cfg.hessian_threshold)
    return _describe(t, cand, budget, image_id, size)


def redetect_in_regions(
    img: RasterImage,
    regions,
    budget: int = SMALL_SCALE_BUDGET,
    *,
    image_id: str = "",
    config: DetectorConfig | None = None,
    threshold_factor: float | None = None,
) -> FeatureSet:
    """Detection restricted to a union of ``(x0, y0, x1, y1)`` rectangles.

    The detector threshold is multiplied by ``threshold_factor`` (default
    ``config.region_threshold_factor``) so small regions are oversampled.
    """
    cfg = config or DetectorConfig()
    factor = cfg.region_threshold_factor if threshold_factor is None else threshold_factor
    size = (img.width, img.height)
    regions = [tuple(int(v) for v in r) for r in regions]
    if not regions or img.width < MIN_SIDE or img.height < MIN_SIDE:
        return FeatureSet.empty(image_id, size)
    t = _normalised_table(img)
    cand = _candidates(t, cfg, cfg.hessian_threshold * factor)
    cx = cand[:, 0].astype(np.float32)
    cy = cand[:, 1].astype(np.float32)
    inside = np.zeros(len(cand), dtype=bool)
    for x0, y0, x1, y1 in regions:
        x0, x1 = max(x0, 0), min(x1, img.width)
        y0, y1 = max(y0, 0), min(y1, img.height)
        inside |= (cx >= x0) & (cx < x1) & (cy >= y0) & (cy < y1)
    return _describe(t, cand[inside], budget, image_id, size)


def keypoints_in_mask(fs: FeatureSet, mask) -> FeatureSet:
    """Keep keypoints whose rounded centre lies on a foreground mask pixel.

    ``mask`` is a 2-D boolean array or anything exposing ``.bits``.
    """
    bits = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    h, w = bits.shape
    if fs.size is not None and tuple(fs.size) != (w, h):
        raise DimensionMismatch(f"mask is {w}x{h}, features were computed on {fs.size[0]}x{fs.size[1]}")
    if len(fs) == 0:
        return fs
    col = np.floor(fs.kp[:, 0].astype(np.float64) + 0.5).astype(np.int64)
    row = np.floor(fs.kp[:, 1].astype(np.float64) + 0.5).astype(np.int64)
    if fs.size is None and (col.max() >= w + 1 or row.max() >= h + 1):
        raise DimensionMismatch("keypoints fall outside the mask")
    col = np.clip(col, 0, w - 1)
    row = np.clip(row, 0, h - 1)
    return fs.subset(np.nonzero(bits[row, col])[0])


# ---------------------------------------------------------------------------
# binary record format


def write_feature_set(fs: FeatureSet, fh) -> None:
    name = fs.image_id.encode("utf-8")
    fh.write(_PFFS_MAGIC)
    fh.write(struct.pack("<HH", _PFFS_VERSION, len(name)))
    fh.write(name)
    fh.write(struct.pack("<I", len(fs)))
    rec = np.concatenate([fs.kp, fs.descriptors], axis=1).astype("<f4")
    fh.write(rec.tobytes())


def read_feature_set(fh) -> FeatureSet | None:
    """Read one record; ``None`` at a clean end of stream."""
    magic = fh.read(4)
    if not magic:
        return None
    if magic != _PFFS_MAGIC:
        raise FormatError("bad feature-set magic")
    head = fh.read(4)
    if len(head) != 4:
        raise FormatError("truncated feature-set header")
    version, nlen = struct.unpack("<HH", head)
    if version != _PFFS_VERSION:
        raise FormatError(f"unsupported feature-set version {version}")
    name = fh.read(nlen)
    (count,) = struct.unpack("<I", fh.read(4))
    width = 5 + DESCRIPTOR_DIM
    raw = fh.read(4 * width * count)
    if len(raw) != 4 * width * count:
        raise FormatError("truncated feature-set body")
    rec = np.frombuffer(raw, dtype="<f4").reshape(count, width).astype(np.float32)
    return FeatureSet(name.decode("utf-8"), rec[:, :5], rec[:, 5:])


def dumps_feature_set(fs: FeatureSet) -> bytes:
    buf = io.BytesIO()
    write_feature_set(fs, buf)
    return buf.getvalue()


def loads_feature_set(data: bytes) -> FeatureSet:
    fs = read_feature_set(io.BytesIO(data))
    if fs is None:
        raise FormatError("empty feature-set record")
    return fs
