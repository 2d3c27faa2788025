"""Seeded Lloyd's k-means over descriptor rows.

Deliberately minimal: deterministic given the seed, iteration cap at 100,
single init.  Used for patch-candidate clustering and the bag-of-words
vocabulary, both of which need reproducible assignments more than they
need the last percent of inertia.
"""

from __future__ import annotations

import numpy as np

MAX_ITERS = 100


def kmeans(X: np.ndarray, k: int, seed: int,
           iters: int = MAX_ITERS) -> tuple[np.ndarray, np.ndarray]:
    """Cluster rows of ``X`` into ``k`` centroids.

    Returns ``(centroids, labels)`` with exactly ``k`` centroids; a
    centroid that loses all members keeps its previous position.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds {n} samples")
    rng = np.random.default_rng(seed)
    centroids = X[rng.choice(n, size=k, replace=False)].copy()
    x_sq = (X ** 2).sum(axis=1)
    labels = np.full(n, -1, dtype=np.int64)
    for _ in range(iters):
        d = x_sq[:, None] - 2.0 * (X @ centroids.T) + (centroids ** 2).sum(axis=1)[None, :]
        new_labels = d.argmin(axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = X[members].mean(axis=0)
    return centroids, labels


def assign(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest-centroid label for each row of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    d = ((X ** 2).sum(axis=1)[:, None] - 2.0 * (X @ centroids.T)
         + (centroids ** 2).sum(axis=1)[None, :])
    return d.argmin(axis=1)
