"""Thresholding, cross-center overlap, and evaluation utilities.

A Laplace distribution is fit to a value vector (stability scores, or
|w| for single-solve baselines) and the support is cut at a quantile of
that fit.  The gap heuristic offers a data-driven alternative cut at the
largest relative drop of the sorted magnitudes.  Downstream, supports
from several centers are compared by how many centers select each voxel,
permutation reruns estimate how much of a support survives under null
labels, and a pooled train/test protocol measures the predictive power
of a support.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .data_model import CenterCollection, Dataset, SupportSet, VoxelMask
from .rss_engine import RSSConfig, ScoreMap, rss_run
from .solvers import SolverConfig, solve_l2_logistic
from .subsampling import _round_half_up

__all__ = [
    "LaplaceFit",
    "OverlapResult",
    "fit_laplace",
    "laplace_cdf",
    "laplace_icdf",
    "threshold_support",
    "laplace_support",
    "gap_threshold",
    "overlap",
    "estimate_false_positives",
    "evaluate_prediction",
    "write_voxel_report",
    "write_overlap_csv",
    "write_score_slices",
]


@dataclass(frozen=True)
class LaplaceFit:
    """Location/scale of a fitted Laplace distribution."""

    mu: float
    b: float

    def __post_init__(self) -> None:
        if not (self.b > 0 and math.isfinite(self.b) and math.isfinite(self.mu)):
            raise ValueError("Laplace fit needs finite mu and b > 0")


def fit_laplace(values, method: str = "moment") -> LaplaceFit:
    """Fit a Laplace distribution by moments (default) or maximum likelihood.

    The moment fit uses the sample mean and b = sqrt(population variance
    / 2); the MLE uses the median and the mean absolute deviation from
    it.  All-equal input has no scale and is rejected.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2 or not np.all(np.isfinite(v)):
        raise ValueError("need at least 2 finite values")
    if np.all(v == v[0]):
        raise ValueError("zero scale: values are all equal")
    if method == "moment":
        mu = float(v.mean())
        b = float(np.sqrt(v.var() / 2.0))
    elif method == "mle":
        mu = float(np.median(v))
        b = float(np.mean(np.abs(v - mu)))
    else:
        raise ValueError("method must be 'moment' or 'mle'")
    return LaplaceFit(mu, b)


def laplace_cdf(x, fit: LaplaceFit):
    """Closed-form Laplace CDF, vectorized over x."""
    z = (np.asarray(x, dtype=np.float64) - fit.mu) / fit.b
    return np.where(z < 0, 0.5 * np.exp(z), 1.0 - 0.5 * np.exp(-z))


def laplace_icdf(p0: float, fit: LaplaceFit) -> float:
    """Laplace quantile: mu - b * sign(p0 - 1/2) * ln(1 - 2|p0 - 1/2|)."""
    if not (0.0 < p0 < 1.0):
        raise ValueError("p0 must lie strictly between 0 and 1")
    q = p0 - 0.5
    sign = 1.0 if q > 0 else (-1.0 if q < 0 else 0.0)
    # log1p keeps the quantile accurate for p0 near 1/2
    return fit.mu - fit.b * sign * math.log1p(-2.0 * abs(q))


def threshold_support(values, theta: float) -> SupportSet:
    """Indices whose magnitude strictly exceeds theta."""
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    v = np.asarray(values, dtype=np.float64).ravel()
    return SupportSet(np.flatnonzero(np.abs(v) > theta))


def laplace_support(values, p0: float = 0.975, method: str = "moment") -> SupportSet:
    """Support at the p0 quantile of a Laplace fit to the values.

    A value vector with no variation carries no ranking information and
    yields the empty support instead of a failed fit.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size and np.all(v == v[0]):
        return SupportSet(np.empty(0, dtype=np.int64))
    fit = fit_laplace(v, method=method)
    return threshold_support(v, laplace_icdf(p0, fit))


def gap_threshold(values) -> float:
    """Threshold at the largest relative drop of the sorted magnitudes.

    With magnitudes sorted descending as v_1 >= v_2 >= ..., the cut index
    k maximizes v_k / v_(k+1) over the first half of the nonzero entries
    (ties keep the smallest k, successors must be nonzero); the threshold
    is the geometric mean sqrt(v_k * v_(k+1)).
    """
    mags = np.sort(np.abs(np.asarray(values, dtype=np.float64).ravel()))[::-1]
    nnz = int(np.count_nonzero(mags))
    if np.unique(mags[:nnz]).size < 2:
        raise ValueError("need at least 2 distinct nonzero magnitudes")
    k_max = math.ceil(nnz / 2)
    best_k, best_ratio = 0, -np.inf
    for k in range(1, k_max + 1):
        if k + 1 > mags.size or mags[k] <= 0:
            break
        ratio = mags[k - 1] / mags[k]
        if ratio > best_ratio:
            best_k, best_ratio = k, ratio
    return float(np.sqrt(mags[best_k - 1] * mags[best_k]))


@dataclass(frozen=True)
class OverlapResult:
    """Cross-center agreement: per-voxel center counts and the >=S sets."""

    counts: np.ndarray
    support_at: dict

    def at(self, S: int) -> SupportSet:
        if S not in self.support_at:
            raise ValueError("S must lie between 1 and the number of centers")
        return self.support_at[S]


def overlap(supports, S: int, p: int) -> OverlapResult:
    """Count how many centers selected each voxel; keep every >=s level set.

    ``S`` names the agreement level of interest and is validated here;
    the result still carries the sets for every level 1..n_centers so
    nesting can be inspected.
    """
    n = len(supports)
    if not (1 <= S <= n):
        raise ValueError("S must lie between 1 and the number of centers")
    counts = np.zeros(p, dtype=np.int64)
    for sup in supports:
        if len(sup) and sup.indices[-1] >= p:
            raise ValueError("support index out of range for p=%d" % p)
        counts[sup.indices] += 1
    support_at = {
        s: SupportSet(np.flatnonzero(counts >= s)) for s in range(1, n + 1)
    }
    return OverlapResult(counts, support_at)


def estimate_false_positives(
    dataset: Dataset,
    clustering,
    cfg: RSSConfig,
    final_support: SupportSet,
    n_perm: int,
    seed: int,
    p0: float = 0.975,
    threads: int = 1,
    permutations=None,
) -> tuple[float, np.ndarray]:
    """Rerun the scoring pipeline under permuted labels.

    For each permutation the labels are uniformly shuffled (permutation i
    depends only on (seed, i)), rss_run is repeated with the same
    clustering and subsample seed, the scores are thresholded at the same
    p0, and the number of selected voxels inside ``final_support`` is
    recorded.  Returns the mean such count divided by |final_support|
    (0 for an empty support) and the per-permutation counts.  An explicit
    list of permutations overrides the random ones.
    """
    if n_perm < 1:
        raise ValueError("n_perm must be positive")
    if permutations is not None and len(permutations) != n_perm:
        raise ValueError("permutations must provide one row order per permutation")
    inside = np.zeros(n_perm, dtype=np.int64)
    for i in range(n_perm):
        if permutations is None:
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
            order = rng.permutation(dataset.n)
        else:
            order = np.asarray(permutations[i], dtype=np.int64)
        permuted = Dataset(dataset.center_id, dataset.X, dataset.y[order], dataset.mask)
        scores = rss_run(permuted, clustering, cfg, threads=threads).scores
        null_support = laplace_support(scores, p0)
        inside[i] = len(null_support.intersection(final_support))
    if len(final_support) == 0:
        return 0.0, inside
    return float(inside.mean() / len(final_support)), inside


_CV_GRID = tuple(10.0 ** k for k in range(-3, 4))


def _accuracy(model, X, y) -> float:
    margin = X @ model.w + model.c
    return float(np.mean((margin >= 0) == (y > 0)))


def _pick_alpha(X, y) -> float:
    """3-fold cross-validated ridge weight over a fixed log grid."""
    folds = [np.arange(i, X.shape[0], 3) for i in range(3)]
    best_alpha, best_acc = _CV_GRID[0], -1.0
    for alpha in _CV_GRID:
        accs = []
        for fold in folds:
            hold = np.zeros(X.shape[0], dtype=bool)
            hold[fold] = True
            if np.unique(y[~hold]).size < 2:
                continue
            model = solve_l2_logistic(X[~hold], y[~hold], SolverConfig(alpha=alpha))
            accs.append(_accuracy(model, X[hold], y[hold]))
        acc = float(np.mean(accs)) if accs else -1.0
        if acc > best_acc:
            best_alpha, best_acc = alpha, acc
    return best_alpha


def evaluate_prediction(
    pooled: CenterCollection,
    support: SupportSet,
    n_splits: int = 100,
    train_fraction: float = 0.9,
    seed: int = 0,
) -> tuple[float, float]:
    """Mean/std test accuracy of an L2 logistic model on the support.

    All centers' rows are pooled and restricted to the support columns;
    each split holds out (1 - train_fraction) of the rows, picks the
    ridge weight by 3-fold cross-validation on the training part, and
    scores the holdout.  Single-class training sets are redrawn.
    """
    if len(support) == 0:
        raise ValueError("support must be nonempty")
    if not (0.0 < train_fraction < 1.0):
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    if n_splits < 1:
        raise ValueError("n_splits must be positive")
    X = np.concatenate([ds.X[:, support.indices] for ds in pooled.datasets], axis=0)
    y = np.concatenate([ds.y for ds in pooled.datasets])
    n = X.shape[0]
    if n < 10:
        raise ValueError("need at least 10 pooled samples")
    n_train = min(n - 1, max(1, _round_half_up(train_fraction * n)))

    accs = np.empty(n_splits)
    for s in range(n_splits):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(s,)))
        for _ in range(100):
            order = rng.permutation(n)
            train, test = order[:n_train], order[n_train:]
            if np.unique(y[train]).size == 2:
                break
        else:
            raise ValueError("could not draw a two-class training split")
        alpha = _pick_alpha(X[train], y[train])
        model = solve_l2_logistic(X[train], y[train], SolverConfig(alpha=alpha))
        accs[s] = _accuracy(model, X[test], y[test])
    return float(accs.mean()), float(accs.std())


def write_voxel_report(path, mask: VoxelMask, scores, support: SupportSet) -> None:
    """CSV of every voxel: index, grid coordinates, score, selected flag."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.shape[0] != mask.p:
        raise ValueError("scores length must match the mask")
    selected = np.zeros(mask.p, dtype=np.int64)
    selected[support.indices] = 1
    with open(path, "w", newline="", encoding="ascii") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "x", "y", "z", "score", "selected"])
        for i in range(mask.p):
            x, y, z = mask.coords[i]
            writer.writerow([i, x, y, z, "%.17g" % scores[i], selected[i]])


def write_overlap_csv(path, result: OverlapResult) -> None:
    """CSV of the agreement curve: S, number of voxels selected by >=S centers."""
    with open(path, "w", newline="", encoding="ascii") as f:
        writer = csv.writer(f)
        writer.writerow(["S", "count"])
        for s in sorted(result.support_at):
            writer.writerow([s, len(result.support_at[s])])


def write_score_slices(out_dir, mask: VoxelMask, scores) -> list:
    """One PGM (P2) image per z-slice, scores scaled to the 0-255 range."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.shape[0] != mask.p:
        raise ValueError("scores length must match the mask")
    os.makedirs(out_dir, exist_ok=True)
    dx, dy, dz = mask.dims
    top = scores.max()
    scale = 255.0 / top if top > 0 else 0.0
    volume = np.zeros((dx, dy, dz), dtype=np.int64)
    grid = mask.index_grid()
    on = grid >= 0
    volume[on] = np.rint(scores[grid[on]] * scale).astype(np.int64)
    paths = []
    for z in range(dz):
        path = os.path.join(out_dir, "slice_%03d.pgm" % z)
        with open(path, "w", encoding="ascii") as f:
            f.write("P2\n%d %d\n255\n" % (dy, dx))
            for x in range(dx):
                f.write(" ".join(str(v) for v in volume[x, :, z]) + "\n")
        paths.append(path)
    return paths
