"""End-to-end evaluation and index backend benchmarks."""

from __future__ import annotations

import statistics
import time

import numpy as np

from .. import annindex
from ..annindex import RecordTable
from ..pipeline import FeatureStore, PipelineConfig, run_batch
from .corpus import Corpus
from .metrics import build_report

DEFAULT_BENCH = ("brute", "kdtree", "kdforest", "pq", "hkmeans")


def index_corpus(
    corpus: Corpus,
    backend: str = "kdtree",
    params: dict | None = None,
    *,
    seed: int = 0,
    config: PipelineConfig | None = None,
    cache_dir=None,
):
    """Extract gallery features and build an index; returns (index, store)."""
    cfg = config or PipelineConfig()
    store = FeatureStore.extract(corpus.gallery_entries(), cfg.budget, cfg.detector, cache_dir=cache_dir)
    index = annindex.build(store.records(), backend, params, seed=seed)
    return index, store


def _stable_stats(index) -> dict:
    st = annindex.stats(index)
    st.pop("build_seconds", None)
    return st


def evaluate(index, store: FeatureStore, corpus: Corpus, config: PipelineConfig | None = None, *, workers: int = 1):
    """Run every corpus query and score tier-1 and final lists.

    Returns (EvalReport, results).  The report holds no wall-clock values,
    so identical inputs give identical bytes.
    """
    cfg = config or PipelineConfig()
    results = run_batch(corpus.query_entries(), index, store, cfg, workers=workers)
    report = build_report(results, corpus.truth)
    report.index = _stable_stats(index)
    report.config = cfg.to_dict()
    return report, results


def _median_time(fn, reps: int) -> float:
    times = []
    for _ in range(reps):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def bench_backends(
    records: RecordTable,
    backends,
    queries: np.ndarray,
    seed: int = 0,
    *,
    reps: int = 5,
    build_reps: int | None = None,
    k: int = 1,
) -> list[dict]:
    """Build/query timing, memory and recall@1 against brute force.

    ``backends`` holds names or ``(name, params)`` pairs; timings are
    medians over ``reps`` runs (``build_reps`` for builds, default ``reps``).
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    build_reps = reps if build_reps is None else build_reps
    queries = np.ascontiguousarray(queries, dtype=np.float32)
    specs = [(b, None) if isinstance(b, str) else (b[0], b[1]) for b in backends]
    oracle = annindex.build(records, "brute", seed=seed)
    truth, _ = oracle.search(queries, 1)
    rows = []
    for name, params in specs:
        built = []

        def make():
            built.append(annindex.build(records, name, params, seed=seed))

        build_s = _median_time(make, max(build_reps, 1))
        index = built[-1]
        ids = []
        query_s = _median_time(lambda: ids.append(index.search(queries, k)[0]), reps)
        got = ids[-1][:, 0]
        st = annindex.stats(index)
        rows.append({
            "backend": name,
            "params": st["params"],
            "build_s": build_s,
            "query_s_per_query": query_s / max(len(queries), 1),
            "memory_bytes": st["memory_bytes"],
            "recall_at_1": float(np.mean(got == truth[:, 0])) if len(queries) else 1.0,
        })
    return rows


def format_bench(rows: list[dict]) -> str:
    cols = ["backend", "build_s", "query_s_per_query", "memory_bytes", "recall_at_1", "params"]
    out = ["\t".join(cols)]
    for r in rows:
        out.append("\t".join([
            r["backend"], f"{r['build_s']:.4f}", f"{r['query_s_per_query']:.6g}",
            str(r["memory_bytes"]), f"{r['recall_at_1']:.4f}",
            ",".join(f"{k}={v}" for k, v in sorted(r["params"].items())),
        ]))
    return "\n".join(out) + "\n"
