"""Seeded Lloyd k-means with k-means++ seeding."""

from __future__ import annotations

import numpy as np

from ._kernels import nearest_center

def assign(X: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centre (lowest index on ties) and its squared distance."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    C = np.ascontiguousarray(C, dtype=np.float64)
    labels = np.empty(len(X), dtype=np.int64)
    dist = np.empty(len(X), dtype=np.float64)
    nearest_center(X, C, labels, dist)
    return labels, dist


def kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    X = np.asarray(X, dtype=np.float64)
    centers = np.empty((k, X.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = X[first]
    closest = ((X - X[first]) ** 2).sum(1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            pick = int(rng.integers(n))
        else:
            cum = np.cumsum(closest)
            pick = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
            pick = min(pick, n - 1)
        centers[j] = X[pick]
        np.minimum(closest, ((X - X[pick]) ** 2).sum(1), out=closest)
    return centers


def kmeans(X: np.ndarray, k: int, iters: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Returns (centers float64 (k, d), labels).

    Empty clusters are re-seeded from the point farthest from its centre.
    """
    X = np.asarray(X, dtype=np.float64)
    k = min(k, len(X))
    centers = kmeans_pp(X, k, rng)
    labels, dist = assign(X, centers)
    for _ in range(iters):
        counts = np.bincount(labels, minlength=k)
        sums = np.stack([np.bincount(labels, weights=X[:, d], minlength=k) for d in range(X.shape[1])], 1)
        new = centers.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        for j in np.nonzero(~filled)[0]:
            far = int(np.argmax(dist))
            new[j] = X[far]
            dist[far] = 0.0
        centers = new
        new_labels, dist = assign(X, centers)
        if np.array_equal(new_labels, labels) and filled.all():
            break
        labels = new_labels
    return centers, labels
