"""Constrained random subsampling of subjects and voxels.

Each draw keeps a class-stratified subset of the rows and, per voxel
cluster, a spatially blocked subset of the columns: axis-aligned cubes
are placed at random over the cluster's bounding box until a per-cluster
quota ceil(voxel_rate * |g|) is met exactly.  Cube placement respects
spatial contiguity; the quota keeps every cluster represented at the
configured rate.  All randomness comes from per-draw generators derived
from one seed, so draws are independent of evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .clustering import Clustering
from .data_model import Dataset, VoxelMask

_ATTEMPT_FACTOR = 50  # cap on cube placements per cluster: 50 * quota


@dataclass(frozen=True)
class SubsampleConfig:
    """Subsampling rates and draw budget.

    row_rate    fraction of subjects kept per draw (class-stratified)
    voxel_rate  fraction of each cluster's voxels kept per draw
    block_edge  edge length of the sampling cubes (1 disables blocking)
    draws       number of independent draws
    seed        root seed; draw b uses the b-th spawned child generator
    """

    row_rate: float = 0.5
    voxel_rate: float = 0.1
    block_edge: int = 5
    draws: int = 200
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.row_rate <= 1.0:
            raise ValueError("row_rate must be in (0, 1]")
        if not 0.0 < self.voxel_rate <= 1.0:
            raise ValueError("voxel_rate must be in (0, 1]")
        if self.block_edge < 1:
            raise ValueError("block_edge must be >= 1")
        if self.draws < 1:
            raise ValueError("draws must be >= 1")


@dataclass(eq=False)
class SubsampleDraw:
    """One draw: row subset and per-cluster voxel subsets.

    ``blocks`` (optional bookkeeping) lists (cluster_id, kept_ids,
    truncated) per placed cube; ``fallbacks`` counts clusters whose quota
    needed the uniform fallback after the placement cap.
    """

    rows: np.ndarray
    per_cluster: list
    fallbacks: int = 0
    blocks: list | None = None

    def voxel_union(self) -> np.ndarray:
        parts = [g for g in self.per_cluster if g.size]
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(parts))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _ceil_quota(rate: float, size: int) -> int:
    # exact-ratio quotas: shave float artifacts like 0.1 * 50 = 5.000...0004
    return int(math.ceil(rate * size - 1e-12)) if size else 0


def draw_rows(y, row_rate, rng) -> np.ndarray:
    """Class-stratified row subset of size round(row_rate * n) (+/- 1).

    The smaller class receives the ceiling quota ceil(row_rate * n_min),
    so both classes always appear; the other class fills the remainder.
    """
    if not 0.0 < row_rate <= 1.0:
        raise ValueError("row_rate must be in (0, 1]")
    y = np.asarray(y)
    pos = np.flatnonzero(y > 0)
    neg = np.flatnonzero(y < 0)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both classes required")
    n = y.size
    total = _round_half_up(row_rate * n)
    # ties go to the positive class so the split is deterministic
    minority, majority = (pos, neg) if pos.size <= neg.size else (neg, pos)
    q_min = min(minority.size, max(1, _ceil_quota(row_rate, minority.size)))
    q_maj = min(majority.size, max(1, total - q_min))
    take_min = rng.choice(minority, size=q_min, replace=False)
    take_maj = rng.choice(majority, size=q_maj, replace=False)
    return np.sort(np.concatenate([take_min, take_maj]))


class BlockSampler:
    """Reusable cube-placement tables for one (mask, clustering) pair."""

    def __init__(self, mask: VoxelMask, clustering: Clustering, cfg: SubsampleConfig):
        if clustering.p != mask.p:
            raise ValueError("clustering covers %d voxels, mask has %d" % (clustering.p, mask.p))
        self.cfg = cfg
        self.assignment = clustering.assignment
        self.q = clustering.q
        self.grid = mask.index_grid()
        self.dims = mask.dims
        self.members = clustering.members()
        e = cfg.block_edge
        self.boxes = []
        for g in self.members:
            if g.size == 0:
                self.boxes.append(None)
                continue
            c = mask.coords[g]
            lo = c.min(axis=0) - (e - 1)
            hi = c.max(axis=0)  # inclusive corner range
            self.boxes.append((lo, hi - lo + 1))

    def _draw_cluster(self, gid, rng, keep_blocks):
        members = self.members[gid]
        quota = _ceil_quota(self.cfg.voxel_rate, members.size)
        if quota == 0:
            return np.empty(0, dtype=np.int64), 0, []
        if quota >= members.size:
            return members.copy(), 0, [(gid, members.copy(), False)] if keep_blocks else []

        e = self.cfg.block_edge
        lo, span = self.boxes[gid]
        volume = int(span[0]) * int(span[1]) * int(span[2])
        selected = np.zeros(len(self.assignment), dtype=bool)
        picked = []
        blocks = []
        count = 0
        cap = _ATTEMPT_FACTOR * quota
        for _ in range(cap):
            flat = int(rng.integers(volume))
            corner = lo + np.array(np.unravel_index(flat, span))
            a = np.maximum(corner, 0)
            b = np.minimum(corner + e, self.dims)
            if np.any(a >= b):
                continue  # cube entirely off-grid counts as an attempt
            ids = self.grid[a[0]:b[0], a[1]:b[1], a[2]:b[2]].ravel()
            ids = ids[ids >= 0]
            ids = ids[self.assignment[ids] == gid]
            new = ids[~selected[ids]]
            if new.size == 0:
                continue
            truncated = False
            if count + new.size > quota:
                keep = quota - count
                new = rng.permutation(new)[:keep]
                truncated = True
            selected[new] = True
            picked.append(new)
            count += new.size
            if keep_blocks:
                blocks.append((gid, np.sort(new), truncated))
            if count == quota:
                break

        fallback = 0
        if count < quota:
            remaining = members[~selected[members]]
            extra = rng.choice(remaining, size=quota - count, replace=False)
            picked.append(extra)
            fallback = 1
            if keep_blocks:
                blocks.append((gid, np.sort(extra), True))
        return np.sort(np.concatenate(picked)), fallback, blocks

    def draw_voxels(self, rng, keep_blocks=False):
        per_cluster = []
        fallbacks = 0
        blocks = [] if keep_blocks else None
        for gid in range(self.q):
            if self.members[gid].size == 0:
                per_cluster.append(np.empty(0, dtype=np.int64))
                continue
            ids, fb, blk = self._draw_cluster(gid, rng, keep_blocks)
            per_cluster.append(ids)
            fallbacks += fb
            if keep_blocks:
                blocks.extend(blk)
        return per_cluster, fallbacks, blocks


def draw_constrained_blocks(mask, clustering, cfg, rng, keep_blocks=False):
    """One voxel draw: per-cluster block-sampled subsets at exact quotas.

    Returns (per_cluster, fallbacks, blocks); ``per_cluster[g]`` holds
    sorted voxel ids with ``len == ceil(voxel_rate * |g|)`` exactly.
    """
    return BlockSampler(mask, clustering, cfg).draw_voxels(rng, keep_blocks=keep_blocks)


def draw_rng(seed, draw_index) -> np.random.Generator:
    """Generator for one draw, derived from the root seed by spawn key."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(draw_index,)))


def make_draw(sampler: BlockSampler, y, cfg: SubsampleConfig, draw_index: int,
              keep_blocks=False) -> SubsampleDraw:
    """Draw ``draw_index``; depends only on (cfg.seed, draw_index)."""
    rng = draw_rng(cfg.seed, draw_index)
    rows = draw_rows(y, cfg.row_rate, rng)
    per_cluster, fallbacks, blocks = sampler.draw_voxels(rng, keep_blocks=keep_blocks)
    return SubsampleDraw(rows, per_cluster, fallbacks, blocks)


def make_draws(dataset: Dataset, clustering: Clustering, cfg: SubsampleConfig,
               keep_blocks=False) -> list[SubsampleDraw]:
    """All draws for one dataset; draw b depends only on (cfg.seed, b)."""
    sampler = BlockSampler(dataset.mask, clustering, cfg)
    return [
        make_draw(sampler, dataset.y, cfg, b, keep_blocks=keep_blocks)
        for b in range(cfg.draws)
    ]
