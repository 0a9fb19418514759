"""Descriptor matching, RANSAC homography estimation and image warping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry, InsufficientMatches
from .features import FeatureSet
from .imagecore import RasterImage

DEFAULT_RATIO = 0.8
DEFAULT_TOP_N = 25
MIN_CORRESPONDENCES = 4


@dataclass(frozen=True)
class Match:
    query_kp: int
    target_kp: int
    distance: float
    ratio: float


@dataclass(frozen=True, eq=False)
class Homography:
    """3x3 matrix mapping target coordinates onto query coordinates."""

    matrix: np.ndarray
    inlier_count: int = 0
    mean_reprojection_error: float = 0.0
    inliers: tuple[int, ...] = ()
    # mean descriptor distance of the matches used for registration
    match_quality: float = float("nan")

    @classmethod
    def identity(cls) -> Homography:
        return cls(np.eye(3))

    @classmethod
    def translation(cls, dx: float, dy: float) -> Homography:
        m = np.eye(3)
        m[0, 2] = dx
        m[1, 2] = dy
        return cls(m)

    def inverse(self) -> Homography:
        inv = np.linalg.inv(self.matrix)
        return Homography(inv / inv[2, 2])

    def apply(self, pts) -> np.ndarray:
        return project(self.matrix, np.asarray(pts, dtype=np.float64))


def match_nndr(fs_q: FeatureSet, fs_t: FeatureSet, ratio_threshold: float = DEFAULT_RATIO) -> list[Match]:
    """Exact two-nearest-neighbour ratio test, made one-to-one on targets.

    A zero best distance gives ratio 0; with a single target descriptor
    every ratio is 0 as well, since there is no second neighbour.
    """
    if len(fs_q) == 0 or len(fs_t) == 0:
        return []
    A = fs_q.descriptors.astype(np.float64)
    B = fs_t.descriptors.astype(np.float64)
    d2 = (A * A).sum(1)[:, None] - 2.0 * A @ B.T + (B * B).sum(1)[None, :]
    kk = min(2, len(B))
    short = min(len(B), 8)
    if short < len(B):
        cand = np.argpartition(d2, short - 1, axis=1)[:, :short]
    else:
        cand = np.broadcast_to(np.arange(len(B)), d2.shape).copy()
    # exact distances over a small shortlist guard against expansion error
    exact = np.sqrt(((A[:, None, :] - B[cand]) ** 2).sum(-1))
    order = np.lexsort((cand, exact), axis=1)[:, :kk]
    best = np.take_along_axis(cand, order, 1)
    dist = np.take_along_axis(exact, order, 1)
    d1 = dist[:, 0]
    if kk == 2:
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(d1 > 0, d1 / dist[:, 1], 0.0)
    else:
        ratio = np.zeros(len(A))
    winner: dict[int, Match] = {}
    for qi in np.nonzero(ratio <= ratio_threshold)[0]:
        m = Match(int(qi), int(best[qi, 0]), float(d1[qi]), float(ratio[qi]))
        cur = winner.get(m.target_kp)
        if cur is None or (m.distance, m.query_kp) < (cur.distance, cur.query_kp):
            winner[m.target_kp] = m
    return sorted(winner.values(), key=lambda m: m.query_kp)


def top_matches(matches, n: int = DEFAULT_TOP_N) -> list[Match]:
    if n < MIN_CORRESPONDENCES:
        raise ValueError("n must be >= 4")
    if len(matches) < MIN_CORRESPONDENCES:
        raise InsufficientMatches(f"{len(matches)} matches, need {MIN_CORRESPONDENCES}")
    return sorted(matches, key=lambda m: (m.distance, m.query_kp))[:n]


# ---------------------------------------------------------------------------
# DLT / RANSAC


def project(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    w = pts @ H[:2, :2].T + H[:2, 2]
    z = pts @ H[2, :2] + H[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        return w / z[:, None]


def _normalizer(pts: np.ndarray) -> np.ndarray:
    """Similarity taking points to zero mean and sqrt(2) mean distance (batched)."""
    mean = pts.mean(-2)
    dist = np.sqrt(((pts - mean[..., None, :]) ** 2).sum(-1)).mean(-1)
    s = np.where(dist > 1e-12, math.sqrt(2.0) / np.maximum(dist, 1e-300), 1.0)
    T = np.zeros(pts.shape[:-2] + (3, 3))
    T[..., 0, 0] = s
    T[..., 1, 1] = s
    T[..., 0, 2] = -s * mean[..., 0]
    T[..., 1, 2] = -s * mean[..., 1]
    T[..., 2, 2] = 1.0
    return T


def _dlt(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalised DLT, batched over leading axes; returns (H, singular-value gap ok)."""
    Ts = _normalizer(src)
    Td = _normalizer(dst)
    ones = np.ones(src.shape[:-1] + (1,))
    s = np.concatenate([src, ones], -1) @ np.swapaxes(Ts, -1, -2)
    d = np.concatenate([dst, ones], -1) @ np.swapaxes(Td, -1, -2)
    x, y = s[..., 0], s[..., 1]
    u, v = d[..., 0], d[..., 1]
    z = np.zeros_like(x)
    o = np.ones_like(x)
    r1 = np.stack([-x, -y, -o, z, z, z, u * x, u * y, u], -1)
    r2 = np.stack([z, z, z, -x, -y, -o, v * x, v * y, v], -1)
    A = np.concatenate([r1, r2], -2)
    _, sv, vt = np.linalg.svd(A)
    h = vt[..., -1, :].reshape(src.shape[:-2] + (3, 3))
    H = np.linalg.inv(Td) @ h @ Ts
    # rank check: a well-posed problem has a unique null vector
    n_rows = A.shape[-2]
    if n_rows >= 9:
        ok = sv[..., -2] > 1e-8 * sv[..., 0]
    else:
        ok = sv[..., 7] > 1e-8 * sv[..., 0]
    return H, ok


def _collinear(pts: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """True where any 3 of the 4 points (batched (..., 4, 2)) are collinear."""
    out = np.zeros(pts.shape[:-2], dtype=bool)
    scale = np.maximum(np.abs(pts).max(axis=(-1, -2)), 1.0) ** 2
    for a, b, c in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        p, q, r = pts[..., a, :], pts[..., b, :], pts[..., c, :]
        area = (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])
        out |= np.abs(area) <= tol * scale
    return out


def _errors(H: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Reprojection errors, batched over H of shape (..., 3, 3)."""
    hom = np.concatenate([src, np.ones((len(src), 1))], 1)
    proj = hom @ np.swapaxes(H, -1, -2)
    z = proj[..., 2]
    bad = np.abs(z) < 1e-12
    z = np.where(bad, 1.0, z)
    err = np.sqrt(((proj[..., :2] / z[..., None] - dst) ** 2).sum(-1))
    return np.where(bad, np.inf, err)


def _normalise(H: np.ndarray) -> np.ndarray | None:
    if not np.all(np.isfinite(H)) or abs(H[2, 2]) < 1e-15:
        return None
    H = H / H[2, 2]
    if abs(np.linalg.det(H)) <= 1e-12:
        return None
    return H


def estimate_homography(
    matches,
    kps_q,
    kps_t,
    seed: int = 0,
    *,
    threshold: float = 3.0,
    max_iters: int = 2000,
    confidence: float = 0.995,
    batch: int = 64,
) -> Homography:
    """RANSAC over 4-point samples; maps target points onto query points.

    ``kps_q`` / ``kps_t`` are (n, 2+) coordinate arrays (or FeatureSets);
    matches index into them.  The final model is refitted on all inliers.
    """
    qxy = np.asarray(getattr(kps_q, "xy", kps_q), dtype=np.float64)[:, :2]
    txy = np.asarray(getattr(kps_t, "xy", kps_t), dtype=np.float64)[:, :2]
    if len(matches) < MIN_CORRESPONDENCES:
        raise DegenerateGeometry(f"{len(matches)} correspondences, need {MIN_CORRESPONDENCES}")
    src = txy[[m.target_kp for m in matches]]
    dst = qxy[[m.query_kp for m in matches]]
    n = len(src)
    rng = np.random.default_rng(seed)

    best_count = 0
    best_err = np.inf
    best_mask = None
    needed = max_iters
    done = 0
    while done < min(needed, max_iters):
        b = min(batch, max_iters - done)
        samples = np.argsort(rng.random((b, n)), axis=1)[:, :4]
        done += b
        s_src = src[samples]
        s_dst = dst[samples]
        good = ~(_collinear(s_src) | _collinear(s_dst))
        if not good.any():
            continue
        H, ok = _dlt(s_src[good], s_dst[good])
        H = H[ok]
        if len(H) == 0:
            continue
        err = _errors(H, src, dst)
        inl = err < threshold
        counts = inl.sum(1)
        errsum = np.where(inl, err, 0.0).sum(1)
        for j in np.lexsort((errsum, -counts)):
            c = int(counts[j])
            if c < best_count or (c == best_count and errsum[j] >= best_err):
                break
            if _normalise(H[j]) is None:
                continue
            best_count, best_err, best_mask = c, float(errsum[j]), inl[j]
            break
        if best_count >= MIN_CORRESPONDENCES:
            w = best_count / n
            p_all = w**4
            if p_all >= 1.0:
                needed = done
            elif p_all > 0:
                needed = int(math.ceil(math.log(1 - confidence) / math.log(1 - p_all)))
    if best_mask is None or best_count < MIN_CORRESPONDENCES:
        raise DegenerateGeometry("no model with >= 4 inliers")

    idx = np.nonzero(best_mask)[0]
    H, ok = _dlt(src[idx], dst[idx])
    H = _normalise(H) if bool(ok) else None
    if H is None:
        raise DegenerateGeometry("inlier set is rank deficient")
    err = _errors(H, src, dst)
    inl = err < threshold
    if inl.sum() >= MIN_CORRESPONDENCES:
        idx = np.nonzero(inl)[0]
    mean_err = float(err[idx].mean())
    quality = float(np.mean([m.distance for m in matches]))
    return Homography(H, len(idx), mean_err, tuple(int(i) for i in idx), quality)


# ---------------------------------------------------------------------------
# warping


def warp(img: RasterImage, h: Homography, out_size) -> tuple[RasterImage, np.ndarray]:
    """Inverse-mapped bilinear resampling of ``img`` through ``h``.

    Returns the warped image (``out_size = (width, height)``) and a boolean
    validity map; pixels whose source falls outside ``img`` are set to 0 and
    flagged invalid.
    """
    w_out, h_out = int(out_size[0]), int(out_size[1])
    inv = np.linalg.inv(h.matrix)
    ys, xs = np.mgrid[0:h_out, 0:w_out]
    pts = np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64)
    src = project(inv, pts)
    sx = src[:, 0].reshape(h_out, w_out)
    sy = src[:, 1].reshape(h_out, w_out)
    H, W = img.height, img.width
    eps = 1e-9
    valid = np.isfinite(sx) & np.isfinite(sy) & (sx >= -eps) & (sy >= -eps) & (sx <= W - 1 + eps) & (sy <= H - 1 + eps)
    sx = np.clip(np.where(valid, sx, 0.0), 0, W - 1)
    sy = np.clip(np.where(valid, sy, 0.0), 0, H - 1)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    px = img.pixels.astype(np.float64)
    out = (
        px[y0, x0] * (1 - fx) * (1 - fy)
        + px[y0, x1] * fx * (1 - fy)
        + px[y1, x0] * (1 - fx) * fy
        + px[y1, x1] * fx * fy
    )
    out[~valid] = 0.0
    return RasterImage(np.floor(out + 0.5)), valid
