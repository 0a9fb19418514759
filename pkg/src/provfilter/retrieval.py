"""Keypoint votes -> image ranking, and fusion of rankings across tiers."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import QueryIdMismatch

DEFAULT_K_PER_KEYPOINT = 5
DEFAULT_MAX_RESULTS = 100


@dataclass(frozen=True)
class RankedEntry:
    image_id: str
    votes: int
    score: float
    mean_distance: float


@dataclass(frozen=True)
class RankedList:
    entries: tuple[RankedEntry, ...] = ()
    tier: int = 1
    query_id: str = ""
    # for fused lists: the tier that supplied each entry's fused score
    origin_tiers: tuple[int, ...] = field(default=(), compare=False)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def image_ids(self) -> list[str]:
        return [e.image_id for e in self.entries]

    def rank_of(self, image_id: str) -> int | None:
        """1-based rank, or None when absent."""
        for r, e in enumerate(self.entries, 1):
            if e.image_id == image_id:
                return r
        return None

    def top(self, k: int) -> list[str]:
        return [e.image_id for e in self.entries[:k]]

    def to_tsv(self) -> str:
        return "".join(
            f"{self.query_id}\t{r}\t{e.image_id}\t{e.votes}\t{e.score:.6f}\t{self.tier}\n"
            for r, e in enumerate(self.entries, 1)
        )

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "tier": self.tier,
            "entries": [
                {"image_id": e.image_id, "votes": e.votes, "score": e.score, "mean_distance": e.mean_distance}
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> RankedList:
        entries = tuple(RankedEntry(**e) for e in d["entries"])
        return cls(entries, int(d["tier"]), d["query_id"])


def _vote_sort_key(e: RankedEntry):
    return (-e.votes, e.mean_distance, e.image_id)


def vote_arrays(
    ids: np.ndarray,
    dists: np.ndarray,
    image_index: np.ndarray,
    image_names: Sequence[str],
    *,
    k_per_keypoint: int = DEFAULT_K_PER_KEYPOINT,
    max_results: int = DEFAULT_MAX_RESULTS,
    query_id: str = "",
    tier: int = 1,
) -> RankedList:
    """Vote from a (n_query_kp, k) neighbour matrix; ids < 0 are empty slots.

    Each query keypoint votes at most once per gallery image, through the
    closest of its neighbours that lies in that image.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        return RankedList((), tier, query_id)
    ids = ids.reshape(len(ids), -1)[:, :k_per_keypoint]
    dists = np.asarray(dists, dtype=np.float64).reshape(len(ids), -1)[:, :k_per_keypoint]
    n_query = len(ids)
    rows = np.repeat(np.arange(n_query), ids.shape[1])
    flat_ids = ids.ravel()
    flat_d = dists.ravel()
    ok = flat_ids >= 0
    rows, flat_ids, flat_d = rows[ok], flat_ids[ok], flat_d[ok]
    if len(rows) == 0:
        return RankedList((), tier, query_id)
    img = np.asarray(image_index)[flat_ids].astype(np.int64)
    order = np.lexsort((flat_d, img, rows))
    rows, img, flat_d = rows[order], img[order], flat_d[order]
    first = np.ones(len(rows), dtype=bool)
    first[1:] = (rows[1:] != rows[:-1]) | (img[1:] != img[:-1])
    img, flat_d = img[first], flat_d[first]
    # sum each image's distances in sorted order so keypoint order cannot change the result
    order = np.lexsort((flat_d, img))
    img, flat_d = img[order], flat_d[order]
    starts = np.flatnonzero(np.r_[True, img[1:] != img[:-1]])
    voted = img[starts]
    counts = np.diff(np.r_[starts, len(img)])
    sums = np.add.reduceat(flat_d, starts)
    entries = [
        RankedEntry(image_names[j], int(c), float(c) / n_query, float(t / c))
        for j, c, t in zip(voted, counts, sums)
    ]
    entries.sort(key=_vote_sort_key)
    return RankedList(tuple(entries[:max_results]), tier, query_id)


def vote(
    neighbor_lists,
    record_table,
    k_per_keypoint: int = DEFAULT_K_PER_KEYPOINT,
    max_results: int = DEFAULT_MAX_RESULTS,
    *,
    query_id: str = "",
    tier: int = 1,
) -> RankedList:
    """Majority voting over per-query-keypoint ``Neighbor`` lists.

    ``record_table`` is an ``annindex.RecordTable`` (or anything with
    ``image_index`` and ``image_names``).
    """
    n = len(neighbor_lists)
    width = max([len(nl) for nl in neighbor_lists], default=0)
    ids = np.full((n, max(width, 1)), -1, dtype=np.int64)
    dists = np.full((n, max(width, 1)), np.inf)
    for r, nl in enumerate(neighbor_lists):
        for c, nb in enumerate(nl):
            ids[r, c] = nb.global_id
            dists[r, c] = nb.distance
    return vote_arrays(
        ids, dists, record_table.image_index, record_table.image_names,
        k_per_keypoint=k_per_keypoint, max_results=max_results, query_id=query_id, tier=tier,
    )


def _minmax(scores: list[float]) -> list[float]:
    lo, hi = min(scores), max(scores)
    if hi <= lo:
        return [1.0] * len(scores)
    return [(s - lo) / (hi - lo) for s in scores]


def aggregate(tier1: RankedList, tier2_lists: Sequence[RankedList]) -> RankedList:
    """Max-fusion of per-list min-max normalised scores.

    Ties on the fused score go to the entry whose winning list has the
    lower tier, then the better rank inside that list, then image id; so the
    tier-1 winner is never displaced by a tier-2 list that merely ties it.
    """
    for lst in tier2_lists:
        if lst.query_id != tier1.query_id:
            raise QueryIdMismatch(f"{lst.query_id!r} != {tier1.query_id!r}")
    best: dict[str, tuple] = {}
    for lst in (tier1, *tier2_lists):
        if not lst.entries:
            continue
        normed = _minmax([e.score for e in lst.entries])
        for rank, (e, s) in enumerate(zip(lst.entries, normed), 1):
            key = (-s, lst.tier, rank, e.image_id)
            if e.image_id not in best or key < best[e.image_id][0]:
                best[e.image_id] = (key, e, s, lst.tier)
    fused = sorted(best.values(), key=lambda item: item[0])
    entries = tuple(replace(e, score=s) for _, e, s, _ in fused)
    return RankedList(entries, 2, tier1.query_id, tuple(t for *_, t in fused))
