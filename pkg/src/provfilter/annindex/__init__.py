"""Descriptor indexes over a whole collection.

``build`` returns an immutable index; ``knn`` / ``knn_batch`` query it and
``stats`` reports build time and an accounting estimate of memory (the sum
of owned array buffers, not process RSS).
"""

from __future__ import annotations

from ..errors import InvalidParams
from .backends import BACKENDS, BruteIndex, HKMeansIndex, KDForestIndex, KDTreeIndex, PQIndex
from .base import ANNIndex, DescriptorRecord, Neighbor, RecordTable, _as_records, require_nonempty, to_neighbors
from .storage import load_index, save_index

__all__ = [
    "ANNIndex",
    "BACKENDS",
    "DescriptorRecord",
    "Neighbor",
    "RecordTable",
    "build",
    "knn",
    "knn_batch",
    "stats",
    "save_index",
    "load_index",
    "BruteIndex",
    "KDTreeIndex",
    "KDForestIndex",
    "PQIndex",
    "HKMeansIndex",
]


def build(records, backend: str = "kdtree", params: dict | None = None, seed: int = 0, epsilon: float = 0.0) -> ANNIndex:
    try:
        cls = BACKENDS[backend]
    except KeyError:
        raise InvalidParams(f"unknown backend {backend!r}; choose from {sorted(BACKENDS)}") from None
    if epsilon < 0:
        raise InvalidParams("epsilon must be >= 0")
    table = _as_records(records)
    require_nonempty(table)
    return cls.build(table, cls.check_params(params), seed=seed, epsilon=epsilon)


def knn(index: ANNIndex, query, k: int) -> list[Neighbor]:
    if k < 1:
        raise InvalidParams("k must be >= 1")
    ids, d2 = index.search(query, k)
    return to_neighbors(ids[0], d2[0])


def knn_batch(index: ANNIndex, queries, k: int) -> list[list[Neighbor]]:
    if k < 1:
        raise InvalidParams("k must be >= 1")
    if len(queries) == 0:
        return []
    ids, d2 = index.search(queries, k)
    return [to_neighbors(i, d) for i, d in zip(ids, d2)]


def stats(index: ANNIndex) -> dict:
    out = {
        "backend": index.backend,
        "N": len(index),
        "params": dict(index.params),
        "epsilon": index.epsilon,
        "memory_bytes": index.memory_bytes(),
        "components": index.memory_components(),
        "build_seconds": index.build_seconds,
    }
    if isinstance(index, PQIndex):
        out["rerank_store_bytes"] = index.rerank_store_bytes()
    return out
