"""Command line entry point: ``provfilter <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import annindex
from .errors import ProvenanceError
from .evalharness.corpus import generate_corpus, load_corpus
from .evalharness.run import DEFAULT_BENCH, bench_backends, evaluate, format_bench, index_corpus
from .evalharness.synth import synth_base_images
from .pipeline import FeatureStore, PipelineConfig, run_query

log = logging.getLogger("provfilter")


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _params(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, val = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected key=value, got {item!r}")
        out[key.strip()] = _value(val.strip())
    return out


def _donors(text: str):
    lo, sep, hi = text.partition("-")
    return (int(lo), int(hi)) if sep else int(lo)


def store_path(index_path) -> Path:
    """Feature store directory written next to an index file."""
    p = Path(index_path)
    return p.with_name(p.name + ".store")


def _config(path, budget=None, seed=None) -> PipelineConfig:
    cfg = PipelineConfig.load(path) if path else PipelineConfig()
    changes = {}
    if budget is not None:
        changes["budget"] = budget
    if seed is not None:
        changes["seed"] = seed
    return PipelineConfig.from_dict({**cfg.to_dict(), **changes}) if changes else cfg


def cmd_index(args) -> int:
    corpus = load_corpus(args.corpus)
    cfg = _config(args.config, args.budget, None)
    index, store = index_corpus(
        corpus, args.backend, _params(args.params), seed=args.seed, config=cfg, cache_dir=args.cache,
    )
    annindex.save_index(index, args.out)
    store.save(store_path(args.out))
    st = annindex.stats(index)
    print(f"{st['backend']}: N={st['N']} memory_bytes={st['memory_bytes']} build_s={st['build_seconds']:.2f}")
    return 0


def _load(index_path):
    index = annindex.load_index(index_path)
    store = FeatureStore.load(store_path(index_path))
    return index, store


def cmd_query(args) -> int:
    index, store = _load(args.index)
    cfg = _config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    qid = args.query_id or Path(args.image).stem
    res = run_query(args.image, index, store, cfg, query_id=qid)
    (out / f"{qid}.json").write_text(res.to_json(args.timings), encoding="utf-8")
    (out / f"{qid}.tsv").write_text(res.to_tsv(), encoding="utf-8")
    if res.mask is not None:
        res.mask.save_png(out, qid)
    print(f"{qid}: verdict={res.verdict.value} r_best={res.r_best} tier2_lists={len(res.tier2)}")
    for r, e in enumerate(res.final.entries[: args.show], 1):
        print(f"  {r:3d} {e.image_id} score={e.score:.4f} votes={e.votes}")
    return 0


def cmd_eval(args) -> int:
    index, store = _load(args.index)
    cfg = _config(args.config)
    corpus = load_corpus(args.manifest)
    report, results = evaluate(index, store, corpus, cfg, workers=args.workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write(out)
    if args.timings:
        timings = {
            r.query_id: r.timings for r in results if hasattr(r, "timings")
        }
        out.with_suffix(".timings.json").write_text(json.dumps(timings, indent=1, sort_keys=True) + "\n")
    for which in ("tier1", "final"):
        for role in ("host", "donor"):
            rec = report.recall[which][role]
            print(f"{which:5s} {role:5s} " + " ".join(f"R@{k}={v:.3f}" for k, v in rec.items()))
    return 0


def cmd_bench(args) -> int:
    corpus = load_corpus(args.corpus)
    cfg = _config(args.config, args.budget, None)
    store = FeatureStore.extract(corpus.gallery_entries(), cfg.budget, cfg.detector, cache_dir=args.cache)
    records = store.records()
    rng = np.random.default_rng(args.seed)
    if corpus.queries:
        qs = FeatureStore.extract(
            [(q["query_id"], q["path"]) for q in corpus.query_entries()], cfg.budget, cfg.detector,
            cache_dir=args.cache,
        )
        pool = np.concatenate([fs.descriptors for fs in qs.features.values()] or [np.zeros((0, 64), np.float32)])
    else:
        pool = records.vectors
    take = min(args.queries, len(pool))
    queries = pool[np.sort(rng.choice(len(pool), take, replace=False))] if take else pool[:0]
    backends = [b.strip() for b in args.backends.split(",") if b.strip()]
    specs = [(b, _params(args.params) if b == args.params_for else None) for b in backends]
    rows = bench_backends(records, specs, queries, args.seed, reps=args.reps)
    text = format_bench(rows)
    Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_gen(args) -> int:
    corpus = generate_corpus(args.base, args.out, args.distractors, args.composites, args.donors, args.seed)
    print(f"{len(corpus.gallery)} gallery images, {len(corpus.queries)} queries -> {Path(args.out) / 'manifest.jsonl'}")
    return 0


def cmd_synth_base(args) -> int:
    paths = synth_base_images(args.out, args.count, args.seed, args.size, args.size)
    print(f"wrote {len(paths)} images to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="provfilter", description="Two-tier image provenance filtering.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("index", help="extract gallery features and build an index")
    s.add_argument("--corpus", required=True, help="corpus manifest (JSON lines)")
    s.add_argument("--backend", default="kdtree", choices=sorted(annindex.BACKENDS))
    s.add_argument("--out", required=True, help="index file; features go to <out>.store/")
    s.add_argument("--budget", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--params", nargs="*", metavar="K=V", help="backend parameters")
    s.add_argument("--config", help="pipeline config (TOML)")
    s.add_argument("--cache", help="feature cache directory")
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("query", help="run two-tier filtering for one image")
    s.add_argument("--index", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--query-id")
    s.add_argument("--show", type=int, default=10, help="final entries to print")
    s.add_argument("--timings", action="store_true", help="include stage timings in the JSON")
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("eval", help="evaluate all queries of a corpus")
    s.add_argument("--index", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="report JSON; a .tsv sibling holds per-query rows")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--timings", action="store_true", help="also write <out>.timings.json")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="compare index backends")
    s.add_argument("--corpus", required=True)
    s.add_argument("--backends", default=",".join(DEFAULT_BENCH))
    s.add_argument("--out", required=True)
    s.add_argument("--queries", type=int, default=1000, help="number of query descriptors")
    s.add_argument("--reps", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--budget", type=int)
    s.add_argument("--config")
    s.add_argument("--cache")
    s.add_argument("--params", nargs="*", metavar="K=V")
    s.add_argument("--params-for", help="backend that receives --params")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("gen", help="generate a synthetic composite corpus")
    s.add_argument("--base", required=True)
    s.add_argument("--distractors", type=int, required=True)
    s.add_argument("--composites", type=int, required=True)
    s.add_argument("--donors", type=_donors, default=1, help="count or range such as 1-2")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("synth-base", help="write procedural base images")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=320)
    s.set_defaults(func=cmd_synth_base)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ProvenanceError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
