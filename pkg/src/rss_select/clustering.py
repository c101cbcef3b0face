"""Voxel clustering: plain k-means over standardized column profiles.

Voxels are clustered by the similarity of their across-subject profiles,
not by spatial position; spatial structure enters the pipeline later via
block subsampling.  Lloyd iterations with k-means++ seeding, squared
Euclidean distances, and farthest-point reseeding of empty clusters.
Everything is deterministic given the seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .data_model import Dataset, FormatError


@dataclass(frozen=True, eq=False)
class Clustering:
    """Assignment of each voxel column to one of q clusters."""

    assignment: np.ndarray  # (p,) ints in [0, q)
    q: int

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64).ravel()
        if a.size == 0:
            raise FormatError("empty clustering assignment")
        if a.min() < 0 or a.max() >= self.q:
            raise FormatError("cluster id out of range [0, %d)" % self.q)
        object.__setattr__(self, "assignment", a)

    @property
    def p(self) -> int:
        return int(self.assignment.size)

    def members(self) -> list[np.ndarray]:
        """Voxel indices per cluster id, index order within each cluster."""
        order = np.argsort(self.assignment, kind="stable")
        sizes = np.bincount(self.assignment, minlength=self.q)
        return np.split(order, np.cumsum(sizes)[:-1])

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.q)


@dataclass(frozen=True, eq=False)
class KMeansResult:
    assignment: np.ndarray
    centers: np.ndarray
    inertia: float
    iterations: int


def _nearest(points, centers):
    # squared distances via the expansion trick; exact values recomputed
    # where they matter (inertia) to avoid cancellation noise
    d2 = (
        np.sum(points * points, axis=1)[:, None]
        - 2.0 * points @ centers.T
        + np.sum(centers * centers, axis=1)[None, :]
    )
    return np.argmin(d2, axis=1)


def _inertia(points, centers, assignment):
    diff = points - centers[assignment]
    return float(np.sum(diff * diff))


def _kpp_init(points, q, rng):
    m = points.shape[0]
    centers = np.empty((q, points.shape[1]))
    centers[0] = points[rng.integers(m)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for k in range(1, q):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(m, p=d2 / total)
        else:  # remaining points coincide with chosen centers
            idx = rng.integers(m)
        centers[k] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centers[k]) ** 2, axis=1))
    return centers


def kmeans(points, q, seed, max_iters=300) -> KMeansResult:
    """Lloyd's k-means with k-means++ seeding.

    Empty clusters are repaired by reseeding their center at the point
    currently farthest from its own center, which keeps the within-cluster
    sum of squares non-increasing across iterations (checked).
    """
    points = np.ascontiguousarray(np.asarray(points, dtype=np.float64))
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("points must be a nonempty (m, d) array")
    m = points.shape[0]
    if not 1 <= q <= m:
        raise ValueError("q must be in [1, %d], got %d" % (m, q))
    rng = np.random.default_rng(seed)

    centers = _kpp_init(points, q, rng)
    assignment = _nearest(points, centers)
    inertia = _inertia(points, centers, assignment)
    iterations = 0
    for it in range(1, max_iters + 1):
        # update step: means of current members; repair empty clusters
        new_centers = centers.copy()
        counts = np.bincount(assignment, minlength=q)
        sums = np.zeros_like(centers)
        np.add.at(sums, assignment, points)
        nonempty = counts > 0
        new_centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        empties = np.flatnonzero(~nonempty)
        if empties.size:
            resid = np.sum((points - new_centers[assignment]) ** 2, axis=1)
            order = np.argsort(resid, kind="stable")[::-1]
            for k, point_idx in zip(empties, order):
                new_centers[k] = points[point_idx]

        new_assignment = _nearest(points, new_centers)
        new_inertia = _inertia(points, new_centers, new_assignment)
        assert new_inertia <= inertia * (1.0 + 1e-12) + 1e-12, "inertia increased"
        converged = np.array_equal(new_assignment, assignment) and not empties.size
        centers, assignment, inertia = new_centers, new_assignment, new_inertia
        iterations = it
        if converged:
            break

    return KMeansResult(assignment, centers, inertia, iterations)


def standardize_columns(X):
    """Column-wise (x - mean) / std with zero-variance columns left at 0."""
    X = np.asarray(X, dtype=np.float64)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    live = sd > 1e-12 * np.maximum(np.abs(mu), 1.0)
    out = np.zeros_like(X)
    out[:, live] = (X[:, live] - mu[live]) / sd[live]
    return out


def cluster_voxels(dataset: Dataset, q: int, seed) -> Clustering:
    """Cluster voxel columns of one center by their standardized profiles."""
    if not 1 <= q <= dataset.p:
        raise ValueError("q must be in [1, %d], got %d" % (dataset.p, q))
    profiles = standardize_columns(dataset.X).T  # one point per voxel
    result = kmeans(profiles, q, seed)
    sizes = np.bincount(result.assignment, minlength=q)
    if np.any(sizes == 0):  # pragma: no cover - repair guarantees nonempty
        raise RuntimeError("k-means produced an empty cluster")
    return Clustering(result.assignment, q)


def save_clustering(path: str | os.PathLike, clustering: Clustering) -> None:
    """Write ``RSSCLU 1 <p> <q>`` then one cluster id per voxel line."""
    with open(path, "w", encoding="ascii") as f:
        f.write("RSSCLU 1 %d %d\n" % (clustering.p, clustering.q))
        for g in clustering.assignment:
            f.write("%d\n" % g)


def load_clustering(path: str | os.PathLike) -> Clustering:
    from .data_model import _read_header

    with open(path, "rb") as f:
        p, q = _read_header(f, "RSSCLU", 2)
        ids = np.loadtxt(f, dtype=np.int64, ndmin=1)
    if ids.size != p:
        raise FormatError("dimension mismatch: header says %d voxels, found %d" % (p, ids.size))
    return Clustering(ids, q)
