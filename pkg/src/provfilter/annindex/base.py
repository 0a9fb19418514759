from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import ClassVar, Iterable, Sequence

import numpy as np

from ..errors import EmptyInput, InvalidParams
from ..features import DESCRIPTOR_DIM, FeatureSet


@dataclass(frozen=True)
class DescriptorRecord:
    global_id: int
    image_id: str
    keypoint_ordinal: int
    vector: np.ndarray


@dataclass(frozen=True, order=True)
class Neighbor:
    distance: float
    global_id: int


class RecordTable:
    """Column store of indexed descriptors; the row number is the global id."""

    def __init__(self, vectors, image_names: Sequence[str], image_index, ordinals):
        vectors = np.ascontiguousarray(np.asarray(vectors, dtype=np.float32))
        if vectors.ndim != 2 or vectors.shape[1] != DESCRIPTOR_DIM:
            raise InvalidParams(f"vectors must be (N, {DESCRIPTOR_DIM}), got {vectors.shape}")
        self.vectors = vectors
        self.image_names = list(image_names)
        self.image_index = np.ascontiguousarray(np.asarray(image_index, dtype=np.int32))
        self.ordinals = np.ascontiguousarray(np.asarray(ordinals, dtype=np.int32))
        if not (len(self.image_index) == len(self.ordinals) == len(vectors)):
            raise InvalidParams("record columns differ in length")

    def __len__(self) -> int:
        return len(self.vectors)

    def image_id(self, global_id: int) -> str:
        return self.image_names[self.image_index[global_id]]

    def record(self, global_id: int) -> DescriptorRecord:
        return DescriptorRecord(
            int(global_id), self.image_id(global_id), int(self.ordinals[global_id]), self.vectors[global_id]
        )

    @classmethod
    def from_records(cls, records: Iterable[DescriptorRecord]) -> RecordTable:
        records = sorted(records, key=lambda r: r.global_id)
        if [r.global_id for r in records] != list(range(len(records))):
            raise InvalidParams("global ids must be dense in [0, N)")
        names: dict[str, int] = {}
        index = [names.setdefault(r.image_id, len(names)) for r in records]
        vecs = np.array([np.asarray(r.vector, dtype=np.float32) for r in records]).reshape(-1, DESCRIPTOR_DIM)
        return cls(vecs, list(names), index, [r.keypoint_ordinal for r in records])

    @classmethod
    def from_feature_sets(cls, feature_sets: Iterable[FeatureSet]) -> RecordTable:
        vecs, names, index, ords = [], [], [], []
        for fs in feature_sets:
            j = len(names)
            names.append(fs.image_id)
            vecs.append(fs.descriptors)
            index.append(np.full(len(fs), j, dtype=np.int32))
            ords.append(np.arange(len(fs), dtype=np.int32))
        if not vecs:
            return cls(np.zeros((0, DESCRIPTOR_DIM), np.float32), [], [], [])
        return cls(np.concatenate(vecs), names, np.concatenate(index), np.concatenate(ords))


def _as_records(records) -> RecordTable:
    if isinstance(records, RecordTable):
        return records
    return RecordTable.from_records(records)


def _checks(value) -> int:
    if value is None or value == "inf" or (isinstance(value, float) and math.isinf(value)):
        return -1
    value = int(value)
    return -1 if value <= 0 else value


class ANNIndex:
    """Common surface of all backends; built instances are read-only."""

    backend: ClassVar[str] = ""
    tag: ClassVar[int] = -1
    defaults: ClassVar[dict] = {}
    exact: ClassVar[bool] = False

    def __init__(self, records: RecordTable, params: dict, seed: int, epsilon: float):
        self.records = records
        self.params = params
        self.seed = int(seed)
        self.epsilon = float(epsilon)
        self.build_seconds = 0.0

    @property
    def vectors(self) -> np.ndarray:
        return self.records.vectors

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def check_params(cls, params: dict | None) -> dict:
        out = dict(cls.defaults)
        for key, value in (params or {}).items():
            if key not in cls.defaults:
                raise InvalidParams(f"unknown {cls.backend} parameter {key!r}")
            out[key] = value
        return cls._validate(out)

    @classmethod
    def _validate(cls, params: dict) -> dict:
        return params

    @classmethod
    def build(cls, records: RecordTable, params: dict, seed: int = 0, epsilon: float = 0.0):
        index = cls(records, params, seed, epsilon)
        t0 = time.perf_counter()
        index._build()
        index.build_seconds = time.perf_counter() - t0
        return index

    def _build(self) -> None:
        pass

    # -- search ---------------------------------------------------------
    def search(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Batched k-NN: (ids int64 (Q, k), squared distances float64 (Q, k)).

        Unfilled slots (approximate search that saw fewer than k points)
        hold id -1 and distance inf.
        """
        Q = np.ascontiguousarray(np.asarray(queries, dtype=np.float32).reshape(-1, DESCRIPTOR_DIM))
        k = max(1, min(int(k), len(self)))
        out_i = np.full((len(Q), k), -1, dtype=np.int64)
        out_d = np.full((len(Q), k), np.inf, dtype=np.float64)
        if len(Q):
            self._search(Q, k, out_i, out_d)
        return out_i, out_d

    def _search(self, Q, k, out_i, out_d) -> None:
        raise NotImplementedError

    @property
    def eps_scale(self) -> float:
        return (1.0 + self.epsilon) ** 2

    # -- persistence / accounting -----------------------------------------
    def arrays(self) -> dict[str, np.ndarray]:
        """Backend payload written to disk (vectors included)."""
        return {"vectors": self.vectors}

    def restore(self, arrays: dict[str, np.ndarray]) -> None:
        pass

    def memory_components(self) -> dict[str, int]:
        comps = {
            "records": int(self.records.image_index.nbytes + self.records.ordinals.nbytes),
        }
        for name, arr in self.arrays().items():
            comps[name] = int(arr.nbytes)
        return comps

    def memory_bytes(self) -> int:
        return sum(self.memory_components().values())


def to_neighbors(ids: np.ndarray, d2: np.ndarray) -> list[Neighbor]:
    keep = ids >= 0
    return [Neighbor(float(math.sqrt(d)), int(i)) for i, d in zip(ids[keep], d2[keep])]


def require_nonempty(records: RecordTable) -> None:
    if len(records) == 0:
        raise EmptyInput("cannot build an index over zero records")
