import json

import numpy as np
import pytest

from provfilter import annindex
from provfilter.contextmask import MaskVerdict
from provfilter.errors import (
    EmptyQueryFeatures,
    FormatError,
    IndexUnavailable,
    InvalidParams,
    ManifestParseError,
)
from provfilter.evalharness.corpus import generate_corpus
from provfilter.evalharness.synth import synth_base_images
from provfilter.imagecore import RasterImage, to_grayscale
from provfilter.pipeline import (
    FeatureStore,
    PipelineConfig,
    QueryError,
    parse_manifest,
    run_batch,
    run_query,
)


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    root = tmp_path_factory.mktemp("world")
    synth_base_images(root / "base", 26, seed=3, width=256, height=256)
    corpus = generate_corpus(root / "base", root / "corpus", 20, 3, 1, seed=4)
    store = FeatureStore.extract(corpus.gallery_entries(), 500, cache_dir=root / "cache")
    index = annindex.build(store.records(), "kdtree", seed=0)
    return root, corpus, store, index


def test_self_retrieval_is_near_duplicate(world):
    _, corpus, store, index = world
    image_id, path = corpus.gallery_entries()[0]
    res = run_query(path, index, store, query_id="self")
    assert res.r_best == image_id
    assert res.verdict is MaskVerdict.NEAR_DUPLICATE
    assert res.tier2 == []
    assert res.final.image_ids == res.tier1.image_ids


def test_composite_finds_host_and_donor(world):
    _, corpus, store, index = world
    truth = corpus.truth
    hits = 0
    for q in corpus.query_entries():
        gt = truth[q["query_id"]]
        res = run_query(q["path"], index, store, query_id=q["query_id"])
        assert gt.host_id in res.tier1.top(10)
        assert res.r_best == res.tier1.entries[0].image_id
        assert res.final.rank_of(res.r_best) == 1
        assert len(res.tier2) <= PipelineConfig().max_components
        hits += all(d in res.final.top(10) for d in gt.donor_ids)
        if res.verdict is MaskVerdict.COMPOSITE:
            assert res.mask is not None and res.mask.components
    assert hits >= 2


def test_noise_query_is_unrelated(world):
    _, _, store, index = world
    noise = RasterImage(np.random.default_rng(0).integers(0, 256, (256, 256, 3)).astype(np.uint8))
    res = run_query(noise, index, store, query_id="noise")
    assert res.verdict is MaskVerdict.UNRELATED
    assert res.tier2 == [] and res.final.image_ids == res.tier1.image_ids


def test_deterministic_serialisation(world):
    _, corpus, store, index = world
    q = corpus.query_entries()[0]
    a = run_query(q["path"], index, store, query_id="q").to_json()
    b = run_query(q["path"], index, store, query_id="q").to_json()
    assert a == b
    doc = json.loads(a)
    assert "timings" not in doc and doc["query_id"] == "q"
    assert set(json.loads(run_query(q["path"], index, store).to_json(True))["timings"]) >= {"tier1", "features"}


def test_tsv_contains_every_list(world):
    _, corpus, store, index = world
    res = run_query(corpus.query_entries()[0]["path"], index, store, query_id="q")
    tiers = {line.split("\t")[5] for line in res.to_tsv().splitlines()}
    assert "1" in tiers and "2" in tiers


def test_extra_iterations_respect_component_cap(world):
    _, corpus, store, index = world
    cfg = PipelineConfig(iterations=3, max_components=2)
    for q in corpus.query_entries():
        res = run_query(q["path"], index, store, cfg, query_id=q["query_id"])
        assert len(res.tier2) <= 2
        assert res.final.rank_of(res.r_best) == 1


def test_zero_components_skips_tier2(world):
    _, corpus, store, index = world
    res = run_query(corpus.query_entries()[0]["path"], index, store, PipelineConfig(max_components=0))
    assert res.tier2 == [] and res.final.image_ids == res.tier1.image_ids


def test_errors(world):
    _, _, store, index = world
    flat = RasterImage(np.full((128, 128, 3), 77, np.uint8))
    with pytest.raises(EmptyQueryFeatures):
        run_query(flat, index, store)
    with pytest.raises(IndexUnavailable):
        run_query(flat, None, store)


def test_batch(world, tmp_path):
    _, corpus, store, index = world
    assert run_batch([], index, store) == []
    entries = corpus.query_entries()[:2]
    bad = {"query_id": "missing", "path": str(tmp_path / "nope.png")}
    out = run_batch([entries[0], bad, entries[1]], index, store)
    assert isinstance(out[1], QueryError) and out[1].error == "ImageIOError"
    singles = [run_query(e["path"], index, store, query_id=e["query_id"]) for e in entries]
    assert [out[0].to_json(), out[2].to_json()] == [s.to_json() for s in singles]
    threaded = run_batch(entries, index, store, workers=2)
    assert [r.to_json() for r in threaded] == [s.to_json() for s in singles]


def test_manifest_parsing(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text('{"path": "a.png"}\n\n{"path": "/abs/b.png", "query_id": "bee"}\n')
    entries = parse_manifest(p)
    assert entries[0]["query_id"] == "a" and entries[0]["path"] == str(tmp_path / "a.png")
    assert entries[1]["query_id"] == "bee" and entries[1]["path"] == "/abs/b.png"
    p.write_text("{broken\n")
    with pytest.raises(ManifestParseError):
        parse_manifest(p)
    p.write_text('{"nopath": 1}\n')
    with pytest.raises(ManifestParseError):
        parse_manifest(p)


def test_config_toml(tmp_path):
    cfg = PipelineConfig(budget=300, diff_threshold=30)
    p = tmp_path / "c.toml"
    p.write_text(cfg.to_toml())
    assert PipelineConfig.load(p) == cfg
    p.write_text("budget = 100\nnot_a_knob = 3\n")
    with pytest.raises(InvalidParams):
        PipelineConfig.load(p)
    p.write_text("budget = [\n")
    with pytest.raises(FormatError):
        PipelineConfig.load(p)
    with pytest.raises(InvalidParams):
        PipelineConfig(ratio_threshold=0)


def test_feature_store_roundtrip_and_cache(world, tmp_path):
    root, corpus, store, _ = world
    store.save(tmp_path / "s")
    back = FeatureStore.load(tmp_path / "s")
    assert back.image_ids == store.image_ids
    assert all(back.get(i) == store.get(i) and back.get(i).size == store.get(i).size for i in store.image_ids)
    again = FeatureStore.extract(corpus.gallery_entries()[:3], 500, cache_dir=root / "cache")
    assert all(again.get(i) == store.get(i) for i in again.image_ids)


def test_gray_query_against_colour_gallery(world):
    _, corpus, store, index = world
    image_id, _ = corpus.gallery_entries()[1]
    gray = to_grayscale(store.image(image_id))
    res = run_query(gray, index, store, query_id="gray")
    assert res.r_best == image_id
