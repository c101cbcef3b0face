"""Stability-selection engine over constrained block subsamples.

Each draw restricts the data to a row subsample and a blockwise voxel
subsample, averages the drawn voxels of every cluster into one reduced
column, solves an L1 logistic problem on the reduced matrix at a fixed
fraction of its critical penalty, and back-projects the selected reduced
columns to all of their drawn voxels.  Scores are per-voxel selection
frequencies conditional on inclusion, accumulated as exact integer
counts so the result is identical for any draw scheduling.

The randomized-L1 baseline shares the row rule and the accounting but
replaces the voxel part of the draw with a uniform column sample and
solves on the raw columns with no averaging.
"""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .clustering import Clustering
from .data_model import Dataset, FormatError, _read_header
from .solvers import SolverConfig, compute_alpha_max, solve_l1_logistic
from .subsampling import (
    BlockSampler,
    SubsampleConfig,
    SubsampleDraw,
    _round_half_up,
    draw_rng,
    draw_rows,
    make_draw,
)

__all__ = [
    "ReducedProblem",
    "ScoreMap",
    "RSSConfig",
    "build_reduced_problem",
    "rss_run",
    "randomized_l1_run",
    "save_score_map",
    "load_score_map",
]

# magnitudes at or below this floor count as zero when reading a support
# off a proximal solution
SELECT_FLOOR = 1e-8


@dataclass(frozen=True)
class ReducedProblem:
    """Averaged per-cluster columns of one draw.

    Column j of ``Xr`` is the mean of the drawn voxels of one nonempty
    cluster (restricted to the drawn rows); ``col_map[j]`` lists those
    voxels.  Clusters that drew no voxels contribute no column.
    """

    Xr: np.ndarray = field(repr=False)
    col_map: tuple = field(repr=False)
    yr: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.Xr.ndim != 2 or self.Xr.shape[0] != self.yr.shape[0]:
            raise ValueError("Xr must be (|J|, q') with one label per row")
        if self.Xr.shape[1] != len(self.col_map):
            raise ValueError("col_map must name the voxels of every reduced column")


@dataclass(frozen=True)
class ScoreMap:
    """Per-voxel selection-frequency scores with their exact counts.

    ``scores[i] = selected[i] / max(included[i], 1)``; a voxel that never
    entered a draw keeps score 0.  ``n_nonconverged`` counts draws whose
    solver hit its iteration cap; more than 10% of them flags the run.
    """

    scores: np.ndarray = field(repr=False)
    included: np.ndarray = field(repr=False)
    selected: np.ndarray = field(repr=False)
    draws: int
    n_nonconverged: int = 0

    def __post_init__(self) -> None:
        included = np.ascontiguousarray(np.asarray(self.included, dtype=np.int64))
        selected = np.ascontiguousarray(np.asarray(self.selected, dtype=np.int64))
        scores = np.ascontiguousarray(np.asarray(self.scores, dtype=np.float64))
        if not (scores.shape == included.shape == selected.shape) or scores.ndim != 1:
            raise ValueError("scores, included, selected must be equal-length vectors")
        if self.draws < 0 or not (0 <= self.n_nonconverged <= max(self.draws, 1)):
            raise ValueError("invalid draw counts")
        if np.any(selected < 0) or np.any(selected > included) or np.any(included > self.draws):
            raise ValueError("counts must satisfy 0 <= selected <= included <= draws")
        if not np.array_equal(scores, selected / np.maximum(included, 1)):
            raise ValueError("scores must equal selected / max(included, 1)")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "included", included)
        object.__setattr__(self, "selected", selected)

    @classmethod
    def from_counts(cls, selected, included, draws, n_nonconverged=0) -> "ScoreMap":
        selected = np.asarray(selected, dtype=np.int64)
        included = np.asarray(included, dtype=np.int64)
        scores = selected / np.maximum(included, 1)
        return cls(scores, included, selected, int(draws), int(n_nonconverged))

    @property
    def p(self) -> int:
        return self.scores.shape[0]

    @property
    def flagged(self) -> bool:
        return self.draws > 0 and self.n_nonconverged > 0.1 * self.draws


@dataclass(frozen=True)
class RSSConfig:
    """Engine parameters.

    Per draw the L1 weight is ``alpha_fraction`` times the critical
    penalty of that draw's reduced problem.  ``select_rule`` is either
    "nonzero" (all coefficients above the magnitude floor) or "top_k"
    (the ``top_k`` largest of them).
    """

    subsample: SubsampleConfig = field(default_factory=SubsampleConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    alpha_fraction: float = 0.1
    select_rule: str = "nonzero"
    top_k: int = 0

    def __post_init__(self) -> None:
        if not (0 < self.alpha_fraction <= 1):
            raise ValueError("alpha_fraction must lie in (0, 1]")
        if self.select_rule not in ("nonzero", "top_k"):
            raise ValueError("select_rule must be 'nonzero' or 'top_k'")
        if self.select_rule == "top_k" and self.top_k < 1:
            raise ValueError("top_k rule needs top_k >= 1")


def build_reduced_problem(dataset: Dataset, draw: SubsampleDraw) -> ReducedProblem:
    """Average each cluster's drawn voxels into one column on the drawn rows."""
    rows = draw.rows
    Xrows = dataset.X[rows]
    cols = []
    col_map = []
    for ids in draw.per_cluster:
        if ids.size == 0:
            continue
        ids = np.sort(np.asarray(ids, dtype=np.int64))
        cols.append(Xrows[:, ids].mean(axis=1))
        col_map.append(ids)
    if not cols:
        raise ValueError("draw contains no voxels; nothing to reduce")
    Xr = np.ascontiguousarray(np.stack(cols, axis=1))
    return ReducedProblem(Xr, tuple(col_map), dataset.y[rows])


def _selected_columns(w: np.ndarray, cfg: RSSConfig) -> np.ndarray:
    """Column indices passing the selection rule."""
    mag = np.abs(w)
    nonzero = np.flatnonzero(mag > SELECT_FLOOR)
    if cfg.select_rule == "nonzero" or nonzero.size <= cfg.top_k:
        return nonzero
    order = np.argsort(mag[nonzero], kind="stable")[::-1]
    return np.sort(nonzero[order[: cfg.top_k]])


def _rss_draw(dataset, sampler, cfg, b):
    """One stability draw: (included voxels, selected voxels, converged)."""
    draw = make_draw(sampler, dataset.y, cfg.subsample, b)
    reduced = build_reduced_problem(dataset, draw)
    alpha = cfg.alpha_fraction * compute_alpha_max(reduced.Xr, reduced.yr)
    model = solve_l1_logistic(
        reduced.Xr, reduced.yr, dataclasses.replace(cfg.solver, alpha=alpha)
    )
    cols = _selected_columns(model.w, cfg)
    if cols.size:
        selected = np.sort(np.concatenate([reduced.col_map[j] for j in cols]))
    else:
        selected = np.empty(0, dtype=np.int64)
    return draw.voxel_union(), selected, model.converged


def _rl1_draw(dataset, cfg, b):
    """One randomized-L1 draw on raw uniformly sampled columns."""
    rng = draw_rng(cfg.subsample.seed, b)
    rows = draw_rows(dataset.y, cfg.subsample.row_rate, rng)
    k = max(1, _round_half_up(cfg.subsample.voxel_rate * dataset.p))
    ids = np.sort(rng.choice(dataset.p, size=k, replace=False).astype(np.int64))
    Xs = dataset.X[np.ix_(rows, ids)]
    ys = dataset.y[rows]
    alpha = cfg.alpha_fraction * compute_alpha_max(Xs, ys)
    model = solve_l1_logistic(Xs, ys, dataclasses.replace(cfg.solver, alpha=alpha))
    return ids, ids[_selected_columns(model.w, cfg)], model.converged


_WORKER: dict = {}


def _init_worker(dataset, clustering, cfg, mode):
    _WORKER["dataset"] = dataset
    _WORKER["cfg"] = cfg
    _WORKER["mode"] = mode
    if mode == "rss":
        _WORKER["sampler"] = BlockSampler(dataset.mask, clustering, cfg.subsample)


def _worker_draw(b):
    if _WORKER["mode"] == "rss":
        return _rss_draw(_WORKER["dataset"], _WORKER["sampler"], _WORKER["cfg"], b)
    return _rl1_draw(_WORKER["dataset"], _WORKER["cfg"], b)


def _accumulate(dataset, cfg, results) -> ScoreMap:
    """Sum per-draw index sets into integer count vectors."""
    included = np.zeros(dataset.p, dtype=np.int64)
    selected = np.zeros(dataset.p, dtype=np.int64)
    bad = 0
    for inc, sel, converged in results:
        included[inc] += 1
        selected[sel] += 1
        bad += not converged
    return ScoreMap.from_counts(selected, included, cfg.subsample.draws, bad)


def _run(dataset, clustering, cfg, threads, mode) -> ScoreMap:
    draws = cfg.subsample.draws
    if threads <= 1:
        if mode == "rss":
            sampler = BlockSampler(dataset.mask, clustering, cfg.subsample)
            results = (_rss_draw(dataset, sampler, cfg, b) for b in range(draws))
        else:
            results = (_rl1_draw(dataset, cfg, b) for b in range(draws))
        return _accumulate(dataset, cfg, results)
    with ProcessPoolExecutor(
        max_workers=threads,
        initializer=_init_worker,
        initargs=(dataset, clustering, cfg, mode),
    ) as pool:
        chunk = max(1, draws // (4 * threads))
        results = list(pool.map(_worker_draw, range(draws), chunksize=chunk))
    return _accumulate(dataset, cfg, results)


def rss_run(dataset: Dataset, clustering: Clustering, cfg: RSSConfig,
            threads: int = 1) -> ScoreMap:
    """Score every voxel by its conditional selection frequency.

    Draw b depends only on (cfg.subsample.seed, b), and the counts are
    integer sums, so the ScoreMap is bit-identical for any ``threads``.
    """
    if clustering.assignment.shape[0] != dataset.p:
        raise ValueError("clustering does not match the dataset's voxel count")
    return _run(dataset, clustering, cfg, threads, "rss")


def randomized_l1_run(dataset: Dataset, cfg: RSSConfig, threads: int = 1) -> ScoreMap:
    """Stability selection with uniform voxel dropout and no averaging."""
    return _run(dataset, None, cfg, threads, "rl1")


def save_score_map(path, score_map: ScoreMap) -> None:
    """Write ``RSSSCORE 1 <p>`` then one ``score included selected`` line per voxel."""
    with open(path, "w", encoding="ascii") as f:
        f.write("RSSSCORE 1 %d\n" % score_map.p)
        for s, inc, sel in zip(score_map.scores, score_map.included, score_map.selected):
            f.write("%.17g %d %d\n" % (s, inc, sel))


def load_score_map(path) -> ScoreMap:
    """Read a score file; draws is recovered as the largest inclusion count."""
    with open(path, "rb") as f:
        (p,) = _read_header(f, "RSSSCORE", 1)
        if p <= 0:
            raise FormatError("malformed header: nonpositive voxel count")
        body = f.read().decode("ascii").split()
    if len(body) != 3 * p:
        raise FormatError(
            "dimension mismatch: expected %d score lines, found %d values" % (p, len(body))
        )
    try:
        values = np.array(body, dtype=np.float64).reshape(p, 3)
    except ValueError:
        raise FormatError("malformed score line: non-numeric field") from None
    if not np.all(np.isfinite(values)):
        raise FormatError("malformed score line: non-finite field")
    scores = values[:, 0]
    included = values[:, 1].astype(np.int64)
    selected = values[:, 2].astype(np.int64)
    if np.any(values[:, 1:] != np.floor(values[:, 1:])):
        raise FormatError("malformed score line: counts must be integers")
    draws = int(included.max()) if p else 0
    if not np.array_equal(scores, selected / np.maximum(included, 1)):
        raise FormatError("score column inconsistent with counts")
    return ScoreMap(scores, included, selected, draws)
