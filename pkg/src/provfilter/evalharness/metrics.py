"""Recall@k over provenance results and the evaluation report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import MissingGroundTruth
from .corpus import ProvenanceGroundTruth

K_VALUES = (1, 5, 10, 20, 50, 100)
LISTS = ("tier1", "final")
ROLES = ("host", "donor")


def _ranked_ids(result, which: str) -> list[str]:
    """Image ids of the tier-1 or final list; failed queries give []."""
    if isinstance(result, dict):
        lst = result.get(which)
        return [e["image_id"] for e in lst["entries"]] if lst else []
    lst = getattr(result, which, None)
    return lst.image_ids if lst is not None else []


def _query_id(result) -> str:
    return result["query_id"] if isinstance(result, dict) else result.query_id


def recall_at_k(results, truth: dict[str, ProvenanceGroundTruth], k: int, role: str = "host", which: str = "final") -> float:
    """Host recall per query, or donor recall micro-averaged over (query, donor) pairs."""
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}")
    hits = total = 0
    for res in results:
        qid = _query_id(res)
        if qid not in truth:
            raise MissingGroundTruth(qid)
        top = set(_ranked_ids(res, which)[:k])
        gt = truth[qid]
        targets = [gt.host_id] if role == "host" else list(gt.donor_ids)
        total += len(targets)
        hits += sum(t in top for t in targets)
    return hits / total if total else 0.0


def rank_in(ids: list[str], image_id: str) -> int | None:
    try:
        return ids.index(image_id) + 1
    except ValueError:
        return None


@dataclass
class EvalReport:
    recall: dict = field(default_factory=dict)
    rows: list[dict] = field(default_factory=list)
    index: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    backends: list[dict] = field(default_factory=list)
    n_queries: int = 0
    n_failed: int = 0

    def to_dict(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "n_failed": self.n_failed,
            "recall": self.recall,
            "index": self.index,
            "config": self.config,
            "backends": self.backends,
            "queries": self.rows,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def to_tsv(self) -> str:
        cols = [
            "query_id", "verdict", "r_best", "host_id", "host_rank_tier1", "host_rank_final",
            "donor_ids", "donor_ranks_tier1", "donor_ranks_final", "donor_fractions", "error",
        ]

        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, list):
                return ",".join("" if x is None else (f"{x:.6f}" if isinstance(x, float) else str(x)) for x in v)
            return str(v)

        lines = ["\t".join(cols)]
        lines += ["\t".join(fmt(row.get(c)) for c in cols) for row in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        """Write ``path`` (JSON) and a sibling ``.tsv`` with the per-query rows."""
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        path.with_suffix(".tsv").write_text(self.to_tsv(), encoding="utf-8")


def _round(x):
    return None if x is None else round(x, 6)


def build_report(results, truth: dict[str, ProvenanceGroundTruth], ks=K_VALUES) -> EvalReport:
    recall = {
        which: {role: {str(k): recall_at_k(results, truth, k, role, which) for k in ks} for role in ROLES}
        for which in LISTS
    }
    rows = []
    failed = 0
    for res in results:
        qid = _query_id(res)
        gt = truth[qid]
        t1, fin = _ranked_ids(res, "tier1"), _ranked_ids(res, "final")
        if isinstance(res, dict):
            err, verdict, r_best = res.get("error"), res.get("verdict"), res.get("r_best")
        else:
            err = getattr(res, "error", None)
            verdict = None if err else res.verdict.value
            r_best = None if err else res.r_best
        failed += err is not None
        rows.append({
            "query_id": qid,
            "verdict": verdict,
            "r_best": r_best,
            "host_id": gt.host_id,
            "host_rank_tier1": rank_in(t1, gt.host_id),
            "host_rank_final": rank_in(fin, gt.host_id),
            "donor_ids": list(gt.donor_ids),
            "donor_ranks_tier1": [rank_in(t1, d) for d in gt.donor_ids],
            "donor_ranks_final": [rank_in(fin, d) for d in gt.donor_ids],
            "donor_fractions": [_round(gt.donor_fraction(i)) for i in range(len(gt.donor_ids))],
            "error": err,
        })
    return EvalReport(recall, rows, n_queries=len(rows), n_failed=failed)
