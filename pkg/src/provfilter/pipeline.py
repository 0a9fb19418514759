"""Two-tier provenance filtering for one query or a batch of queries."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .annindex import ANNIndex, RecordTable
from .contextmask import (
    ContextMask,
    MaskParams,
    MaskVerdict,
    VerdictThresholds,
    classify_mask,
    compute_mask,
    difference_map,
    from_bits,
)
from .errors import (
    EmptyQueryFeatures,
    FormatError,
    ImageIOError,
    IndexUnavailable,
    InvalidParams,
    ManifestParseError,
    ProvenanceError,
)
from .features import (
    LARGE_SCALE_BUDGET,
    DetectorConfig,
    FeatureSet,
    detect_and_describe,
    keypoints_in_mask,
    read_feature_set,
    redetect_in_regions,
    write_feature_set,
)
from .geometry import estimate_homography, match_nndr, top_matches, warp
from .imagecore import RasterImage, load_image
from .retrieval import RankedList, aggregate, vote_arrays

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)

STAGES = ("features", "tier1", "registration", "mask", "tier2", "aggregate")


@dataclass(frozen=True)
class PipelineConfig:
    # features
    budget: int = LARGE_SCALE_BUDGET
    hessian_threshold: float = DetectorConfig.hessian_threshold
    region_threshold_factor: float = DetectorConfig.region_threshold_factor
    # retrieval
    k_per_keypoint: int = 5
    max_results: int = 100
    # geometry
    ratio_threshold: float = 0.8
    top_n_matches: int = 25
    ransac_threshold: float = 3.0
    ransac_iters: int = 2000
    ransac_confidence: float = 0.995
    seed: int = 0
    # context mask
    levels: int = 32
    diff_threshold: int = 24
    open_size: int = 5
    median_size: int = 5
    min_area: int = 64
    coverage_high: float = 0.9
    coverage_low: float = 0.005
    max_match_distance: float = 0.18
    min_inliers: int = 8
    # tier 2
    max_components: int = 4
    min_kp: int = 10
    iterations: int = 1

    def __post_init__(self):
        if self.budget < 1:
            raise InvalidParams("budget must be >= 1")
        if not 0 < self.ratio_threshold <= 1:
            raise InvalidParams("ratio_threshold must be in (0, 1]")
        if self.top_n_matches < 4:
            raise InvalidParams("top_n_matches must be >= 4")
        if self.levels < 2:
            raise InvalidParams("levels must be >= 2")
        if self.max_components < 0 or self.iterations < 0 or self.k_per_keypoint < 1:
            raise InvalidParams("max_components, iterations >= 0 and k_per_keypoint >= 1 required")

    @property
    def detector(self) -> DetectorConfig:
        return DetectorConfig(
            hessian_threshold=self.hessian_threshold,
            region_threshold_factor=self.region_threshold_factor,
        )

    @property
    def mask_params(self) -> MaskParams:
        return MaskParams(self.levels, self.diff_threshold, self.open_size, self.median_size, self.min_area)

    @property
    def thresholds(self) -> VerdictThresholds:
        return VerdictThresholds(self.coverage_high, self.coverage_low, self.max_match_distance, self.min_inliers)

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(names))
        if unknown:
            raise InvalidParams(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, value in d.items():
            default = names[key].default
            if isinstance(default, bool) or not isinstance(value, (int, float)):
                raise InvalidParams(f"config key {key!r} must be numeric")
            kwargs[key] = type(default)(value)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> PipelineConfig:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise ImageIOError(str(exc)) from exc
        except tomllib.TOMLDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_toml(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in self.to_dict().items())


# ---------------------------------------------------------------------------
# feature store


def image_size(path) -> tuple[int, int]:
    """(width, height) from the file header without decoding pixels."""
    try:
        with Image.open(path) as im:
            return im.size
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


class FeatureStore:
    """Per-image FeatureSets and source paths for a whole collection.

    On disk: ``features.pffs`` (concatenated records) and ``images.json``
    (ordered image ids with paths and image sizes).
    """

    def __init__(self, features: dict[str, FeatureSet], paths: dict[str, str] | None = None):
        self.features = dict(features)
        self.paths = dict(paths or {})

    def __len__(self) -> int:
        return len(self.features)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.features

    @property
    def image_ids(self) -> list[str]:
        return list(self.features)

    def get(self, image_id: str) -> FeatureSet:
        return self.features[image_id]

    def image(self, image_id: str) -> RasterImage:
        return load_image(self.paths[image_id])

    def records(self) -> RecordTable:
        return RecordTable.from_feature_sets(list(self.features.values()))

    @classmethod
    def extract(
        cls,
        entries,
        budget: int = LARGE_SCALE_BUDGET,
        config: DetectorConfig | None = None,
        cache_dir=None,
    ) -> FeatureStore:
        """Run the detector over ``(image_id, path)`` pairs.

        With ``cache_dir``, results are memoised by a hash of the file bytes
        and the detector settings.
        """
        config = config or DetectorConfig()
        cache = Path(cache_dir) if cache_dir is not None else None
        if cache is not None:
            cache.mkdir(parents=True, exist_ok=True)
        tag = json.dumps([budget, dataclasses.asdict(config)], sort_keys=True).encode()
        features, paths = {}, {}
        for image_id, path in entries:
            path = str(path)
            fs = None
            key = None
            if cache is not None:
                key = hashlib.sha256(tag + Path(path).read_bytes()).hexdigest()
                hit = cache / f"{key}.pffs"
                if hit.is_file():
                    with open(hit, "rb") as fh:
                        cached = read_feature_set(fh)
                    fs = FeatureSet(image_id, cached.kp, cached.descriptors, image_size(path))
            if fs is None:
                fs = detect_and_describe(load_image(path), budget, image_id=image_id, config=config)
                if cache is not None:
                    with open(cache / f"{key}.pffs", "wb") as fh:
                        write_feature_set(fs, fh)
            features[image_id] = fs
            paths[image_id] = path
        return cls(features, paths)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "features.pffs", "wb") as fh:
            for fs in self.features.values():
                write_feature_set(fs, fh)
        meta = [
            {"image_id": i, "path": self.paths.get(i), "size": list(fs.size) if fs.size else None}
            for i, fs in self.features.items()
        ]
        (out / "images.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, out_dir) -> FeatureStore:
        out = Path(out_dir)
        try:
            meta = json.loads((out / "images.json").read_text())
            fh = open(out / "features.pffs", "rb")
        except OSError as exc:
            raise ImageIOError(str(exc)) from exc
        features = {}
        with fh:
            for m in meta:
                fs = read_feature_set(fh)
                if fs is None or fs.image_id != m["image_id"]:
                    raise FormatError(f"feature store out of sync at {m['image_id']!r}")
                size = tuple(m["size"]) if m.get("size") else None
                features[fs.image_id] = FeatureSet(fs.image_id, fs.kp, fs.descriptors, size)
        return cls(features, {m["image_id"]: m["path"] for m in meta if m.get("path")})


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class Registration:
    host_id: str
    n_matches: int
    inlier_count: int
    mean_reprojection_error: float
    match_quality: float
    matrix: tuple[tuple[float, ...], ...] | None
    error: str | None = None


@dataclass
class ProvenanceResult:
    query_id: str
    tier1: RankedList
    r_best: str | None
    verdict: MaskVerdict
    mask: ContextMask | None
    tier2: list[RankedList]
    final: RankedList
    timings: dict[str, float] = field(default_factory=dict)
    registration: Registration | None = None
    n_query_keypoints: int = 0

    def to_dict(self, include_timings: bool = False) -> dict:
        d = {
            "query_id": self.query_id,
            "n_query_keypoints": self.n_query_keypoints,
            "r_best": self.r_best,
            "verdict": self.verdict.value,
            "registration": dataclasses.asdict(self.registration) if self.registration else None,
            "mask": self.mask.to_dict() if self.mask is not None else None,
            "tier1": self.tier1.to_dict(),
            "tier2": [lst.to_dict() for lst in self.tier2],
            "final": self.final.to_dict(),
        }
        if include_timings:
            d["timings"] = dict(self.timings)
        return d

    def to_json(self, include_timings: bool = False) -> str:
        return json.dumps(_clean(self.to_dict(include_timings)), sort_keys=True, indent=1, allow_nan=False) + "\n"

    def to_tsv(self) -> str:
        return self.tier1.to_tsv() + "".join(lst.to_tsv() for lst in self.tier2) + self.final.to_tsv()


@dataclass(frozen=True)
class QueryError:
    query_id: str
    error: str
    message: str

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "error": self.error, "message": self.message}

    def to_json(self, include_timings: bool = False) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


def _clean(obj):
    """Replace non-finite floats with None so the JSON stays strict."""
    if isinstance(obj, float):
        return obj if np.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# query


def _search(index: ANNIndex, fs: FeatureSet, cfg: PipelineConfig, query_id: str, tier: int) -> RankedList:
    if len(fs) == 0:
        return RankedList((), tier, query_id)
    ids, d2 = index.search(fs.descriptors, cfg.k_per_keypoint)
    rec = index.records
    return vote_arrays(
        ids, np.sqrt(d2), rec.image_index, rec.image_names,
        k_per_keypoint=cfg.k_per_keypoint, max_results=cfg.max_results, query_id=query_id, tier=tier,
    )


def _register(query: RasterImage, fs_q: FeatureSet, host_id: str, store: FeatureStore, cfg: PipelineConfig):
    """Align ``host_id`` onto the query; returns (Registration, aligned, validity)."""
    fs_h = store.get(host_id)
    matches = match_nndr(fs_q, fs_h, cfg.ratio_threshold)
    try:
        best = top_matches(matches, cfg.top_n_matches)
        h = estimate_homography(
            best, fs_q.xy, fs_h.xy, cfg.seed,
            threshold=cfg.ransac_threshold, max_iters=cfg.ransac_iters, confidence=cfg.ransac_confidence,
        )
    except ProvenanceError as exc:
        return Registration(host_id, len(matches), 0, float("nan"), float("nan"), None, type(exc).__name__), None, None
    aligned, valid = warp(store.image(host_id), h, (query.width, query.height))
    reg = Registration(
        host_id, len(matches), h.inlier_count, h.mean_reprojection_error, h.match_quality,
        tuple(tuple(float(v) for v in row) for row in h.matrix),
    )
    return reg, aligned, valid


def _tier2(query, fs_q, mask: ContextMask, index, cfg: PipelineConfig, query_id: str, limit=None) -> list[RankedList]:
    lists = []
    limit = cfg.max_components if limit is None else limit
    for i in range(min(limit, len(mask.components))):
        comp = mask.components[i]
        sub = keypoints_in_mask(fs_q, mask.component_bits(i))
        if len(sub) < cfg.min_kp:
            sub = redetect_in_regions(query, [comp.bbox], cfg.budget, image_id=query_id, config=cfg.detector)
        lst = _search(index, sub, cfg, query_id, 2)
        if lst.entries:
            lists.append(lst)
    return lists


def _query_features(query: RasterImage, cfg: PipelineConfig, query_id: str) -> FeatureSet:
    fs = detect_and_describe(query, cfg.budget, image_id=query_id, config=cfg.detector)
    if len(fs) == 0:
        # relax the detector threshold over the whole frame once
        fs = redetect_in_regions(query, [(0, 0, query.width, query.height)], cfg.budget,
                                 image_id=query_id, config=cfg.detector)
    if len(fs) == 0:
        raise EmptyQueryFeatures(f"no keypoints in query {query_id!r}")
    return fs


def run_query(
    query_image,
    index: ANNIndex,
    corpus: FeatureStore,
    config: PipelineConfig | None = None,
    *,
    query_id: str | None = None,
) -> ProvenanceResult:
    cfg = config or PipelineConfig()
    if index is None or not isinstance(index, ANNIndex):
        raise IndexUnavailable("no index loaded")
    if not isinstance(query_image, RasterImage):
        path = Path(query_image)
        query_id = query_id or path.stem
        query_image = load_image(path)
    query_id = query_id or "query"
    timings = {s: 0.0 for s in STAGES}
    clock = time.perf_counter

    t = clock()
    fs_q = _query_features(query_image, cfg, query_id)
    timings["features"] = clock() - t

    t = clock()
    tier1 = _search(index, fs_q, cfg, query_id, 1)
    timings["tier1"] = clock() - t

    r_best = tier1.entries[0].image_id if tier1.entries else None
    verdict = MaskVerdict.UNRELATED
    mask = None
    reg = None
    tier2: list[RankedList] = []
    if r_best is not None and r_best in corpus:
        t = clock()
        reg, aligned, valid = _register(query_image, fs_q, r_best, corpus, cfg)
        timings["registration"] = clock() - t
        if aligned is not None:
            t = clock()
            mask = compute_mask(query_image, aligned, valid, cfg.mask_params)
            verdict = classify_mask(
                mask, reg.match_quality, cfg.thresholds, inlier_count=reg.inlier_count,
            )
            timings["mask"] = clock() - t
        if verdict is MaskVerdict.COMPOSITE:
            t = clock()
            tier2 = _tier2(query_image, fs_q, mask, index, cfg, query_id)
            timings["tier2"] = clock() - t
            tier2 = _refine(query_image, fs_q, tier1, tier2, mask, index, corpus, cfg, query_id, timings, {r_best})

    t = clock()
    final = aggregate(tier1, tier2) if tier2 else _identity_fusion(tier1)
    timings["aggregate"] = clock() - t
    return ProvenanceResult(query_id, tier1, r_best, verdict, mask, tier2, final, timings, reg, len(fs_q))


def _identity_fusion(tier1: RankedList) -> RankedList:
    return aggregate(tier1, [])


def _refine(query, fs_q, tier1, tier2, mask, index, corpus, cfg, query_id, timings, used) -> list[RankedList]:
    """Extra refinement passes when ``iterations > 1``.

    Each pass aligns the best fused image not yet used as a reference and
    removes the query area it explains from the mask; tier 2 is then
    repeated on what remains.
    """
    clock = time.perf_counter
    for _ in range(cfg.iterations - 1):
        fused = aggregate(tier1, tier2)
        ref = next((e.image_id for e in fused.entries if e.image_id not in used and e.image_id in corpus), None)
        if ref is None:
            break
        used.add(ref)
        t = clock()
        reg, aligned, valid = _register(query, fs_q, ref, corpus, cfg)
        if aligned is None or reg.inlier_count < cfg.min_inliers or reg.match_quality > cfg.max_match_distance:
            timings["registration"] += clock() - t
            continue
        explained = valid & (difference_map(query, aligned, cfg.levels) <= cfg.diff_threshold)
        mask = from_bits(mask.bits & ~explained, cfg.min_area)
        timings["mask"] += clock() - t
        room = cfg.max_components - len(tier2)
        if not mask.components or room <= 0:
            break
        t = clock()
        tier2 = tier2 + _tier2(query, fs_q, mask, index, cfg, query_id, room)
        timings["tier2"] += clock() - t
    return tier2


# ---------------------------------------------------------------------------
# batches


def parse_manifest(path_or_lines) -> list[dict]:
    """Query manifest: JSON lines with ``path`` and optional ``query_id``."""
    if isinstance(path_or_lines, (str, Path)):
        try:
            lines = Path(path_or_lines).read_text().splitlines()
        except OSError as exc:
            raise ManifestParseError(str(exc)) from exc
        base = Path(path_or_lines).parent
    else:
        lines, base = list(path_or_lines), None
    out = []
    for n, line in enumerate(lines, 1):
        if isinstance(line, dict):
            entry = line
        else:
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"line {n}: {exc}") from exc
        if not isinstance(entry, dict) or "path" not in entry:
            raise ManifestParseError(f"line {n}: entry needs a 'path'")
        entry = dict(entry)
        p = Path(entry["path"])
        if base is not None and not p.is_absolute():
            entry["path"] = str(base / p)
        entry.setdefault("query_id", entry.get("image_id") or p.stem)
        out.append(entry)
    return out


def run_batch(queries, index, corpus, config=None, *, workers: int = 1) -> list:
    """``run_query`` over a manifest; failures become ``QueryError`` rows."""
    entries = parse_manifest(queries) if isinstance(queries, (str, Path)) else parse_manifest(list(queries))

    def one(entry):
        try:
            return run_query(entry["path"], index, corpus, config, query_id=entry["query_id"])
        except (ProvenanceError, OSError) as exc:
            log.warning("query %s failed: %s", entry["query_id"], exc)
            return QueryError(entry["query_id"], type(exc).__name__, str(exc))

    if workers <= 1 or len(entries) <= 1:
        return [one(e) for e in entries]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(one, entries))
