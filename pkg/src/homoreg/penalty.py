"""Column-group structures, the fusion (Laplacian) penalty and K-means.

Labels are 0-based: a membership over ``m`` columns with ``K`` groups holds
integers in ``{0, ..., K-1}``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Membership:
    labels: np.ndarray
    n_clusters: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1:
            raise ValueError("labels must be a vector")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
        K = int(self.n_clusters)
        if K < 1:
            raise ValueError("n_clusters must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= K):
            raise ValueError(f"labels must lie in [0, {K - 1}]")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "n_clusters", K)

    @property
    def m(self):
        return self.labels.size

    def sizes(self):
        return np.bincount(self.labels, minlength=self.n_clusters)

    def groups(self):
        return [np.flatnonzero(self.labels == k) for k in range(self.n_clusters)]

    def __eq__(self, other):
        return (
            isinstance(other, Membership)
            and self.n_clusters == other.n_clusters
            and np.array_equal(self.labels, other.labels)
        )

    def __hash__(self):
        return hash((self.n_clusters, self.labels.tobytes()))


@dataclass(frozen=True)
class LaplacianPair:
    """``L_tilde = D - O`` from the co-membership graph, the group-size weight
    matrix ``W`` and the normalized Laplacian ``L``."""

    L_tilde: np.ndarray
    L: np.ndarray
    W: np.ndarray


def build_laplacian(g):
    """Laplacians of the co-membership graph of ``g``.

    ``L = 2 W^{1/2} L_tilde W^{1/2}``, which equals ``2 (I - P)`` with ``P``
    the within-group averaging projector.  This normalization makes
    ``tr(B L B') = 2 * sum_k sum_{j in G_k} ||b_j - mu_k||^2`` hold exactly and
    keeps the spectrum inside ``[0, 2]``.
    """
    labels = g.labels
    same = labels[:, None] == labels[None, :]
    O = same.astype(float)
    np.fill_diagonal(O, 0.0)
    L_tilde = np.diag(O.sum(axis=1)) - O
    sizes = g.sizes()[labels].astype(float)
    W = np.diag(1.0 / sizes)
    half = np.sqrt(1.0 / sizes)
    L = 2.0 * half[:, None] * L_tilde * half[None, :]
    return LaplacianPair(L_tilde=L_tilde, L=L, W=W)


def group_means(points, g):
    """Row means of ``points`` (m x d) per group; empty groups get zeros."""
    points = np.asarray(points, dtype=float)
    K = g.n_clusters
    sums = np.zeros((K, points.shape[1]))
    np.add.at(sums, g.labels, points)
    sizes = g.sizes()
    return sums / np.maximum(sizes, 1)[:, None]


def within_cluster_ss(points, g):
    """Sum of squared distances of each row of ``points`` to its group mean."""
    points = np.asarray(points, dtype=float)
    centers = group_means(points, g)
    return float(np.sum((points - centers[g.labels]) ** 2))


def fusion_penalty(B, g):
    """``2 * sum_k sum_{j in G_k} ||b_j - mu_k||^2`` over the columns of B."""
    B = np.asarray(B, dtype=float)
    if B.ndim != 2 or B.shape[1] != g.m:
        raise ValueError(f"B must have {g.m} columns, got shape {B.shape}")
    return 2.0 * within_cluster_ss(B.T, g)


# ---------------------------------------------------------------------------
# Lloyd's algorithm
# ---------------------------------------------------------------------------


def _sq_dists(points, centers):
    d = (
        np.sum(points**2, axis=1)[:, None]
        - 2.0 * points @ centers.T
        + np.sum(centers**2, axis=1)[None, :]
    )
    return np.maximum(d, 0.0)


def _plusplus_centers(points, K, rng):
    m = points.shape[0]
    idx = [int(rng.integers(m))]
    d2 = np.sum((points - points[idx[0]]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(m, p=d2 / total))
        else:
            nxt = int(rng.integers(m))
        idx.append(nxt)
        d2 = np.minimum(d2, np.sum((points - points[nxt]) ** 2, axis=1))
    return points[idx].copy()


def _repair_empty(points, labels, K):
    # move the point farthest from its own center into each empty cluster
    labels = labels.copy()
    while True:
        sizes = np.bincount(labels, minlength=K)
        empty = np.flatnonzero(sizes == 0)
        if empty.size == 0:
            return labels
        centers = group_means(points, Membership(labels, K))
        dist = np.sum((points - centers[labels]) ** 2, axis=1)
        dist[sizes[labels] <= 1] = -np.inf
        j = int(np.argmax(dist))
        labels[j] = empty[0]


def lloyd(points, K, labels=None, centers=None, max_iter=300):
    """Lloyd iterations from either an initial partition or initial centers.

    Returns ``(labels, objective)``.  Ties in assignment go to the lowest
    cluster index and empty clusters are repaired after every assignment, so
    the objective is non-increasing and every cluster ends non-empty
    (requires ``K <= len(points)``).
    """
    points = np.asarray(points, dtype=float)
    m = points.shape[0]
    if not 1 <= K <= m:
        raise ValueError(f"need 1 <= K <= {m}, got K={K}")
    if labels is None:
        if centers is None:
            raise ValueError("provide initial labels or centers")
        labels = np.argmin(_sq_dists(points, centers), axis=1)
    labels = _repair_empty(points, np.asarray(labels, dtype=np.int64), K)
    obj = within_cluster_ss(points, Membership(labels, K))
    for _ in range(max_iter):
        centers = group_means(points, Membership(labels, K))
        new = np.argmin(_sq_dists(points, centers), axis=1)
        new = _repair_empty(points, new, K)
        new_obj = within_cluster_ss(points, Membership(new, K))
        # stopping on non-strict decrease rules out cycling between tied partitions
        if np.array_equal(new, labels) or new_obj >= obj:
            break
        labels, obj = new, new_obj
    return labels, obj


def kmeans(points, K, restarts=10, seed=0, init_labels=None):
    """Best-of-restarts K-means on the rows of ``points``.

    ``init_labels`` (if given) is run first as a warm start; the remaining
    restarts use k-means++ seeding from ``numpy.random.default_rng(seed)``.
    Returns ``(objective, Membership)``; ties keep the earliest run.
    """
    points = np.asarray(points, dtype=float)
    m = points.shape[0]
    if not 1 <= K <= m:
        raise ValueError(f"need 1 <= K <= m={m}, got K={K}")
    rng = np.random.default_rng(seed)
    best = None
    if init_labels is not None:
        best = lloyd(points, K, labels=init_labels)[::-1]
    for _ in range(max(restarts, 0 if best is not None else 1)):
        labels, obj = lloyd(points, K, centers=_plusplus_centers(points, K, rng))
        if best is None or obj < best[0]:
            best = (obj, labels)
    return float(best[0]), Membership(best[1], K)


def kmeans_penalty(B, K, restarts=20, seed=0, init=None):
    """K-means within-cluster scatter over the columns of ``B`` (no factor 2).

    Returns ``(value, Membership)`` at the best local minimum found.
    """
    B = np.asarray(B, dtype=float)
    if B.ndim != 2:
        raise ValueError("B must be 2-d")
    if K > B.shape[1]:
        raise ValueError(f"K={K} exceeds the number of columns {B.shape[1]}")
    init_labels = None if init is None else init.labels
    return kmeans(B.T, K, restarts=restarts, seed=seed, init_labels=init_labels)
