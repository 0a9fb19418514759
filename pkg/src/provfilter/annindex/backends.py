"""The five index backends: brute force, KD-tree, KD-forest, PQ and a
hierarchical k-means tree."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidParams
from . import _kernels
from .base import ANNIndex, _checks
from .kmeans import assign, kmeans

DEFAULT_LEAF_CHECKS = 256


class BruteIndex(ANNIndex):
    """Exhaustive search; the recall oracle for every other backend."""

    backend = "brute"
    tag = 0
    exact = True
    _QCHUNK = 64

    def _search(self, Q, k, out_i, out_d):
        X = self.vectors
        X64t = X.T.astype(np.float64)
        xx = (X64t**2).sum(0)
        scale = float(xx.max()) if len(xx) else 0.0
        for s in range(0, len(Q), self._QCHUNK):
            q = Q[s : s + self._QCHUNK].astype(np.float64)
            approx = xx[None, :] - 2.0 * q @ X64t + (q * q).sum(1)[:, None]
            kth = np.partition(approx, k - 1, axis=1)[:, k - 1]
            # the expansion is only used to shortlist; final distances are exact
            slack = 1e-7 * (scale + (q * q).sum(1)) + 1e-9
            for j in range(len(q)):
                cand = np.nonzero(approx[j] <= kth[j] + slack[j])[0]
                _kernels.rerank(X, Q[s + j], cand, k, out_i[s + j], out_d[s + j])


class KDTreeIndex(ANNIndex):
    """Randomised KD-trees searched best-bin-first with a shared queue.

    A single tree splits on the max-variance dimension; with several trees
    each split dimension is drawn from the ``top_dims`` highest-variance
    dimensions so the trees partition space differently.
    """

    backend = "kdtree"
    tag = 1
    defaults = {"num_trees": 1, "max_leaf_checks": DEFAULT_LEAF_CHECKS, "leaf_size": 16, "top_dims": 5}

    @classmethod
    def _validate(cls, params):
        params["num_trees"] = int(params["num_trees"])
        params["leaf_size"] = int(params["leaf_size"])
        params["top_dims"] = int(params["top_dims"])
        params["max_leaf_checks"] = _checks(params["max_leaf_checks"])
        if params["num_trees"] < 1 or params["leaf_size"] < 1 or params["top_dims"] < 1:
            raise InvalidParams("num_trees, leaf_size and top_dims must be >= 1")
        return params

    def _build(self):
        X = self.vectors
        n_trees = self.params["num_trees"]
        seeds = np.random.SeedSequence(self.seed).spawn(n_trees)
        parts = [
            _build_tree(X, self.params["leaf_size"], np.random.default_rng(s), n_trees > 1, self.params["top_dims"])
            for s in seeds
        ]
        node_off = 0
        perm_off = 0
        roots, cols = [], {k: [] for k in ("split_dim", "split_val", "left", "right", "leaf_start", "leaf_end")}
        perms = []
        for tree in parts:
            roots.append(node_off)
            internal = tree["left"] >= 0
            cols["split_dim"].append(tree["split_dim"])
            cols["split_val"].append(tree["split_val"])
            cols["left"].append(np.where(internal, tree["left"] + node_off, -1))
            cols["right"].append(np.where(internal, tree["right"] + node_off, -1))
            cols["leaf_start"].append(tree["leaf_start"] + perm_off)
            cols["leaf_end"].append(tree["leaf_end"] + perm_off)
            perms.append(tree["perm"])
            node_off += len(tree["left"])
            perm_off += len(tree["perm"])
        self.roots = np.array(roots, dtype=np.int64)
        self.split_dim = np.concatenate(cols["split_dim"]).astype(np.int64)
        self.split_val = np.concatenate(cols["split_val"]).astype(np.float32)
        self.left = np.concatenate(cols["left"]).astype(np.int64)
        self.right = np.concatenate(cols["right"]).astype(np.int64)
        self.leaf_start = np.concatenate(cols["leaf_start"]).astype(np.int64)
        self.leaf_end = np.concatenate(cols["leaf_end"]).astype(np.int64)
        self.perm = np.concatenate(perms).astype(np.int64)

    _TREE_ARRAYS = ("roots", "split_dim", "split_val", "left", "right", "leaf_start", "leaf_end", "perm")

    def arrays(self):
        out = {"vectors": self.vectors}
        for name in self._TREE_ARRAYS:
            out[name] = getattr(self, name)
        return out

    def restore(self, arrays):
        for name in self._TREE_ARRAYS:
            setattr(self, name, arrays[name])

    def _search(self, Q, k, out_i, out_d):
        _kernels.kd_search(
            self.vectors, Q, k, self.roots, self.split_dim, self.split_val, self.left, self.right,
            self.leaf_start, self.leaf_end, self.perm, self.params["max_leaf_checks"], self.eps_scale,
            out_i, out_d,
        )


class KDForestIndex(KDTreeIndex):
    backend = "kdforest"
    tag = 2
    defaults = dict(KDTreeIndex.defaults, num_trees=2)


def _build_tree(X, leaf_size, rng, randomized, top_dims):
    n = len(X)
    perm = np.arange(n, dtype=np.int64)
    split_dim, split_val, left, right, lstart, lend = [], [], [], [], [], []

    def new_node():
        split_dim.append(-1)
        split_val.append(0.0)
        left.append(-1)
        right.append(-1)
        lstart.append(0)
        lend.append(0)
        return len(left) - 1

    stack = [(new_node(), 0, n)]
    while stack:
        node, start, end = stack.pop()
        lstart[node], lend[node] = start, end
        if end - start <= leaf_size:
            continue
        idx = perm[start:end]
        pts = X[idx]
        var = pts.astype(np.float64).var(axis=0)
        live = np.nonzero(var > 0)[0]
        if len(live) == 0:
            continue
        if randomized:
            top = live[np.argsort(-var[live], kind="stable")[:top_dims]]
            dim = int(top[rng.integers(len(top))])
        else:
            dim = int(live[np.argmax(var[live])])
        vals = pts[:, dim]
        mid = (end - start) // 2
        order = np.argpartition(vals, mid)
        perm[start:end] = idx[order]
        split_dim[node] = dim
        split_val[node] = float(vals[order[mid]])
        lo = new_node()
        hi = new_node()
        left[node], right[node] = lo, hi
        stack.append((hi, start + mid, end))
        stack.append((lo, start, start + mid))
    return {
        "split_dim": np.array(split_dim, dtype=np.int64),
        "split_val": np.array(split_val, dtype=np.float32),
        "left": np.array(left, dtype=np.int64),
        "right": np.array(right, dtype=np.int64),
        "leaf_start": np.array(lstart, dtype=np.int64),
        "leaf_end": np.array(lend, dtype=np.int64),
        "perm": perm,
    }


class PQIndex(ANNIndex):
    """Product quantiser with exhaustive ADC scan and exact re-ranking.

    The compressed index is the codebooks plus one byte per sub-code.  The
    float vectors needed for re-ranking form a separate re-rank store that is
    reported on its own in ``stats`` rather than folded into memory_bytes.
    ``rerank_factor`` k -> re-rank the best ``rerank_factor * k`` ADC
    candidates; 0 re-ranks every code.  Codebooks are trained on at most
    ``train_size`` sampled vectors.
    """

    backend = "pq"
    tag = 3
    defaults = {"m": 8, "ks": 256, "iters": 25, "rerank_factor": 4, "train_size": 65536}

    @classmethod
    def _validate(cls, params):
        for key in ("m", "ks", "iters", "rerank_factor", "train_size"):
            params[key] = int(params[key])
        m = params["m"]
        if m < 1 or 64 % m:
            raise InvalidParams(f"m={m} must divide the descriptor dimension 64")
        if not 2 <= params["ks"] <= 256:
            raise InvalidParams("ks must be in [2, 256]")
        if params["iters"] < 0 or params["rerank_factor"] < 0 or params["train_size"] < 1:
            raise InvalidParams("iters and rerank_factor must be >= 0")
        return params

    def _build(self):
        X = self.vectors
        m = self.params["m"]
        sub = X.shape[1] // m
        rng = np.random.default_rng(self.seed)
        ks = min(self.params["ks"], len(X))
        train = X
        if len(X) > self.params["train_size"]:
            pick = np.sort(rng.choice(len(X), self.params["train_size"], replace=False))
            train = X[pick]
        self.codebooks = np.zeros((m, ks, sub), dtype=np.float32)
        self.codes = np.zeros((len(X), m), dtype=np.uint8)
        for j in range(m):
            centers, _ = kmeans(train[:, j * sub : (j + 1) * sub], ks, self.params["iters"], rng)
            self.codebooks[j] = centers
            self.codes[:, j], _ = assign(X[:, j * sub : (j + 1) * sub], self.codebooks[j])

    def arrays(self):
        return {"codebooks": self.codebooks, "codes": self.codes, "rerank_vectors": self.vectors}

    def restore(self, arrays):
        self.codebooks = arrays["codebooks"]
        self.codes = arrays["codes"]

    def memory_components(self):
        comps = super().memory_components()
        comps.pop("rerank_vectors")
        return comps

    def rerank_store_bytes(self) -> int:
        return int(self.vectors.nbytes)

    def adc_distances(self, q: np.ndarray) -> np.ndarray:
        m, ks, sub = self.codebooks.shape
        qs = q.astype(np.float64).reshape(m, 1, sub)
        tables = ((self.codebooks.astype(np.float64) - qs) ** 2).sum(-1)
        out = np.empty(len(self.codes), dtype=np.float64)
        _kernels.adc_table_sum(tables, self.codes, out)
        return out

    def _search(self, Q, k, out_i, out_d):
        n = len(self)
        depth = self.params["rerank_factor"] * k
        for j, q in enumerate(Q):
            if depth <= 0 or depth >= n:
                # full scan: ADC is still computed, as a real uncapped PQ query would
                self.adc_distances(q)
                cand = np.arange(n, dtype=np.int64)
            else:
                adc = self.adc_distances(q)
                cand = np.argpartition(adc, depth - 1)[:depth].astype(np.int64)
            _kernels.rerank(self.vectors, q, cand, k, out_i[j], out_d[j])


class HKMeansIndex(ANNIndex):
    """Hierarchical k-means tree searched best-bin-first."""

    backend = "hkmeans"
    tag = 4
    defaults = {"branching": 32, "leaf_size": 100, "max_leaf_checks": DEFAULT_LEAF_CHECKS, "iters": 10}

    @classmethod
    def _validate(cls, params):
        params["branching"] = int(params["branching"])
        params["leaf_size"] = int(params["leaf_size"])
        params["iters"] = int(params["iters"])
        params["max_leaf_checks"] = _checks(params["max_leaf_checks"])
        if params["branching"] < 2:
            raise InvalidParams("branching must be >= 2")
        if params["leaf_size"] < 1 or params["iters"] < 0:
            raise InvalidParams("leaf_size must be >= 1 and iters >= 0")
        return params

    def _build(self):
        X = self.vectors
        rng = np.random.default_rng(self.seed)
        B = self.params["branching"]
        leaf_size = self.params["leaf_size"]
        perm = np.arange(len(X), dtype=np.int64)
        centers = [X.astype(np.float64).mean(0)]
        child_start = [0]
        child_count = [0]
        lstart = [0]
        lend = [len(X)]
        queue = [0]
        head = 0
        # breadth-first so the children of a node get consecutive ids
        while head < len(queue):
            node = queue[head]
            head += 1
            s, e = lstart[node], lend[node]
            if e - s <= leaf_size:
                continue
            idx = perm[s:e].copy()
            cen, lab = kmeans(X[idx], B, self.params["iters"], rng)
            groups = [np.nonzero(lab == c)[0] for c in range(len(cen))]
            groups = [(c, g) for c, g in enumerate(groups) if len(g)]
            if len(groups) < 2:
                continue
            child_start[node] = len(centers)
            child_count[node] = len(groups)
            pos = s
            for c, g in groups:
                perm[pos : pos + len(g)] = idx[g]
                centers.append(cen[c])
                child_start.append(0)
                child_count.append(0)
                lstart.append(pos)
                lend.append(pos + len(g))
                queue.append(len(centers) - 1)
                pos += len(g)
        self.centers = np.asarray(centers, dtype=np.float32)
        self.child_start = np.asarray(child_start, dtype=np.int64)
        self.child_count = np.asarray(child_count, dtype=np.int64)
        self.leaf_start = np.asarray(lstart, dtype=np.int64)
        self.leaf_end = np.asarray(lend, dtype=np.int64)
        self.perm = perm
        radius = np.zeros(len(self.centers), dtype=np.float64)
        c64 = self.centers.astype(np.float64)
        X64 = X.astype(np.float64)
        for node in range(len(self.centers)):
            pts = X64[perm[self.leaf_start[node] : self.leaf_end[node]]]
            r = np.sqrt(((pts - c64[node]) ** 2).sum(1).max()) if len(pts) else 0.0
            radius[node] = r * (1 + 1e-9) + 1e-9
        self.radius = radius

    _TREE_ARRAYS = ("centers", "radius", "child_start", "child_count", "leaf_start", "leaf_end", "perm")

    def arrays(self):
        out = {"vectors": self.vectors}
        for name in self._TREE_ARRAYS:
            out[name] = getattr(self, name)
        return out

    def restore(self, arrays):
        for name in self._TREE_ARRAYS:
            setattr(self, name, arrays[name])

    def _search(self, Q, k, out_i, out_d):
        _kernels.hk_search(
            self.vectors, Q, k, self.centers, self.radius, self.child_start, self.child_count,
            self.leaf_start, self.leaf_end, self.perm, self.params["max_leaf_checks"], self.eps_scale,
            out_i, out_d,
        )


BACKENDS: dict[str, type[ANNIndex]] = {
    cls.backend: cls for cls in (BruteIndex, KDTreeIndex, KDForestIndex, PQIndex, HKMeansIndex)
}
BACKEND_BY_TAG = {cls.tag: cls for cls in BACKENDS.values()}
