"""Synthetic composite corpora with ground truth.

Layout written by ``generate_corpus``::

    out_dir/gallery/<image_id>.png   hosts, donors and distractors
    out_dir/queries/<query_id>.jpg   composites (or re-compressed hosts)
    out_dir/manifest.jsonl           one JSON object per image

Gallery lines carry ``image_id``, ``path`` (relative to ``out_dir``) and
``role``; query lines add ``host_id``, ``donor_ids``, ``splice_rects``
(``[x0, y0, x1, y1]`` end-exclusive, query coordinates), ``donor_areas``
(pasted pixel counts) and ``transform_log``.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import InsufficientBaseImages, InvalidParams, ManifestParseError
from ..imagecore import RasterImage, jpeg_roundtrip, load_image, save_image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".ppm", ".pgm", ".bmp", ".tif", ".tiff")
QUERY_QUALITY = 85


@dataclass(frozen=True)
class ProvenanceGroundTruth:
    query_id: str
    host_id: str
    donor_ids: tuple[str, ...] = ()
    splice_rects: tuple[tuple[int, int, int, int], ...] = ()
    transform_log: tuple[dict, ...] = ()
    donor_areas: tuple[int, ...] = ()
    width: int = 0
    height: int = 0

    def donor_fraction(self, i: int) -> float | None:
        """Share of the query area covered by the i-th pasted region, if recorded."""
        if i >= len(self.donor_areas) or self.width * self.height == 0:
            return None
        return self.donor_areas[i] / float(self.width * self.height)

    def to_dict(self) -> dict:
        return {
            "host_id": self.host_id,
            "donor_ids": list(self.donor_ids),
            "splice_rects": [list(r) for r in self.splice_rects],
            "donor_areas": list(self.donor_areas),
            "transform_log": list(self.transform_log),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, query_id: str, d: dict) -> ProvenanceGroundTruth:
        return cls(
            query_id,
            d["host_id"],
            tuple(d.get("donor_ids", ())),
            tuple(tuple(int(v) for v in r) for r in d.get("splice_rects", ())),
            tuple(d.get("transform_log", ())),
            tuple(int(a) for a in d.get("donor_areas", ())),
            int(d.get("width", 0)),
            int(d.get("height", 0)),
        )


@dataclass
class Corpus:
    root: Path
    gallery: list[dict] = field(default_factory=list)
    queries: list[dict] = field(default_factory=list)

    @property
    def truth(self) -> dict[str, ProvenanceGroundTruth]:
        return {q["image_id"]: ProvenanceGroundTruth.from_dict(q["image_id"], q) for q in self.queries}

    def gallery_entries(self) -> list[tuple[str, Path]]:
        return [(g["image_id"], self.root / g["path"]) for g in self.gallery]

    def query_entries(self) -> list[dict]:
        return [{"query_id": q["image_id"], "path": str(self.root / q["path"])} for q in self.queries]


def list_base_images(base_dir) -> list[Path]:
    base = Path(base_dir)
    if not base.is_dir():
        raise InsufficientBaseImages(f"no such directory: {base}")
    return sorted(p for p in base.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _donor_count(donors, rng) -> int:
    if isinstance(donors, (tuple, list)):
        lo, hi = int(donors[0]), int(donors[1])
        return int(rng.integers(lo, hi + 1))
    return int(donors)


def _max_donors(donors) -> int:
    return int(donors[1]) if isinstance(donors, (tuple, list)) else int(donors)


def _transform_patch(patch: np.ndarray, log: dict) -> tuple[np.ndarray, np.ndarray]:
    """Apply the logged operations; returns (pixels, coverage mask)."""
    im = Image.fromarray(patch)
    alpha = Image.new("L", im.size, 255)
    if "scale" in log:
        size = (max(1, round(im.width * log["scale"])), max(1, round(im.height * log["scale"])))
        im = im.resize(size, Image.BILINEAR)
        alpha = alpha.resize(size, Image.NEAREST)
    if "rotation" in log:
        im = im.rotate(log["rotation"], resample=Image.BILINEAR, expand=True)
        alpha = alpha.rotate(log["rotation"], resample=Image.NEAREST, expand=True)
    px = np.asarray(im, dtype=np.float64)
    if "brightness" in log:
        px = np.clip(px * log["brightness"], 0, 255)
    px = np.floor(px + 0.5).astype(np.uint8)
    if "jpeg" in log:
        px = jpeg_roundtrip(RasterImage(px), log["jpeg"]).pixels
    return px, np.asarray(alpha) > 127


def _sample_ops(rng) -> dict:
    """Seeded random subset of the four donor operations."""
    log = {}
    pick = rng.random(4) < 0.5
    values = (
        round(float(np.exp(rng.uniform(np.log(0.5), np.log(2.0)))), 4),
        round(float(rng.uniform(-30.0, 30.0)), 3),
        round(float(rng.uniform(0.8, 1.2)), 4),
        int(rng.integers(70, 96)),
    )
    for key, on, val in zip(("scale", "rotation", "brightness", "jpeg"), pick, values):
        if on:
            log[key] = val
    return log


def _overlaps(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _splice(host: np.ndarray, donor: np.ndarray, taken: list, rng, max_tries: int = 200):
    """Cut, transform and paste one donor region; None if it cannot be placed."""
    H, W = host.shape[:2]
    dh, dw = donor.shape[:2]
    for _ in range(max_tries):
        log = _sample_ops(rng)
        frac = float(rng.uniform(0.05, 0.25))
        aspect = float(np.exp(rng.uniform(np.log(0.5), np.log(2.0))))
        # size the cut so the pasted footprint is frac of the host area
        s = log.get("scale", 1.0)
        area = frac * W * H / (s * s)
        cw = int(round(np.sqrt(area * aspect)))
        ch = int(round(area / max(cw, 1)))
        if not (8 <= cw <= dw and 8 <= ch <= dh):
            continue
        sx = int(rng.integers(0, dw - cw + 1))
        sy = int(rng.integers(0, dh - ch + 1))
        patch, alpha = _transform_patch(donor[sy:sy + ch, sx:sx + cw], log)
        ph, pw = alpha.shape
        if ph > H or pw > W:
            continue
        x = int(rng.integers(0, W - pw + 1))
        y = int(rng.integers(0, H - ph + 1))
        ys, xs = np.nonzero(alpha)
        rect = (x + int(xs.min()), y + int(ys.min()), x + int(xs.max()) + 1, y + int(ys.max()) + 1)
        if any(_overlaps(rect, r) for r in taken):
            continue
        region = host[y:y + ph, x:x + pw]
        if patch.ndim == 2:
            patch = patch[..., None]
        region[alpha] = patch[alpha][:, : host.shape[2]]
        log["source_rect"] = [sx, sy, sx + cw, sy + ch]
        return rect, int(alpha.sum()), log
    return None


def generate_corpus(
    base_dir,
    out_dir,
    n_distractors: int,
    n_composites: int,
    donors_per_composite=1,
    seed: int = 0,
    *,
    query_quality: int = QUERY_QUALITY,
) -> Corpus:
    """Build a composite corpus from the images in ``base_dir``.

    ``donors_per_composite`` is an int or an inclusive ``(lo, hi)`` range
    drawn per composite.  With 0 donors each query is its host re-encoded
    as JPEG.
    """
    if n_distractors < 0 or n_composites < 0 or _max_donors(donors_per_composite) < 0:
        raise InvalidParams("counts must be non-negative")
    bases = list_base_images(base_dir)
    need = n_distractors + n_composites * (1 + _max_donors(donors_per_composite))
    if len(bases) < need:
        raise InsufficientBaseImages(f"need {need} base images, found {len(bases)}")
    rng = np.random.default_rng(seed)
    order = [bases[i] for i in rng.permutation(len(bases))]
    out = Path(out_dir)
    (out / "gallery").mkdir(parents=True, exist_ok=True)
    (out / "queries").mkdir(parents=True, exist_ok=True)
    corpus = Corpus(out)
    pool = iter(order)
    roles: dict[str, str] = {}
    sources: dict[str, Path] = {}

    def take(role: str) -> tuple[str, np.ndarray]:
        p = next(pool)
        roles[p.stem] = role
        sources[p.stem] = p
        return p.stem, load_image(p).pixels

    for qi in range(n_composites):
        host_id, host = take("host")
        canvas = host.copy()
        if canvas.shape[2] == 1:
            canvas = np.repeat(canvas, 3, axis=2)
        donor_ids, rects, areas, logs = [], [], [], []
        for _ in range(_donor_count(donors_per_composite, rng)):
            donor_id, donor = take("donor")
            if donor.shape[2] == 1:
                donor = np.repeat(donor, 3, axis=2)
            placed = _splice(canvas, donor, rects, rng)
            if placed is None:
                # the donor still sits in the gallery as a distractor-like image
                continue
            rect, area, log = placed
            donor_ids.append(donor_id)
            rects.append(rect)
            areas.append(area)
            logs.append(log)
        query_id = f"query_{qi:04d}"
        rel = Path("queries") / f"{query_id}.jpg"
        save_image(RasterImage(canvas), out / rel, quality=query_quality)
        corpus.queries.append({
            "image_id": query_id,
            "path": str(rel),
            "role": "query",
            **ProvenanceGroundTruth(
                query_id, host_id, tuple(donor_ids), tuple(rects), tuple(logs), tuple(areas),
                canvas.shape[1], canvas.shape[0],
            ).to_dict(),
        })
    for _ in range(n_distractors):
        take("distractor")

    for image_id in sorted(roles):
        rel = Path("gallery") / f"{image_id}.png"
        src = sources[image_id]
        if src.suffix.lower() == ".png":
            shutil.copyfile(src, out / rel)
        else:
            save_image(load_image(src), out / rel)
        corpus.gallery.append({"image_id": image_id, "path": str(rel), "role": roles[image_id]})
    write_manifest(corpus, out / "manifest.jsonl")
    return corpus


def write_manifest(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in corpus.gallery + corpus.queries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def load_corpus(manifest) -> Corpus:
    path = Path(manifest)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ManifestParseError(str(exc)) from exc
    corpus = Corpus(path.parent)
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestParseError(f"{path}:{n}: {exc}") from exc
        if not isinstance(entry, dict) or not {"image_id", "path", "role"} <= set(entry):
            raise ManifestParseError(f"{path}:{n}: needs image_id, path and role")
        (corpus.queries if entry["role"] == "query" else corpus.gallery).append(entry)
    return corpus
