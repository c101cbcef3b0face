"""Core data types and file formats for multi-center voxel datasets.

All on-disk formats use an ASCII header line followed by either ASCII
records or a raw little-endian float64 payload (matrix files).  Formats
round-trip bit-exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np


class FormatError(ValueError):
    """Raised for malformed files or inconsistent data-model invariants."""


def _as_int_triple(dims) -> tuple[int, int, int]:
    t = tuple(int(d) for d in dims)
    if len(t) != 3 or any(d <= 0 for d in t):
        raise FormatError("dims must be three positive integers, got %r" % (dims,))
    return t


@dataclass(frozen=True, eq=False)
class VoxelMask:
    """Ordered set of in-mask voxel coordinates on a 3-D grid.

    The position of a coordinate in ``coords`` is the voxel's column index
    in every data matrix that shares this mask.
    """

    dims: tuple[int, int, int]
    coords: np.ndarray  # (p, 3) int array of (x, y, z)

    def __post_init__(self):
        object.__setattr__(self, "dims", _as_int_triple(self.dims))
        coords = np.ascontiguousarray(np.asarray(self.coords, dtype=np.int64))
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise FormatError("mask coords must be (p, 3), got %r" % (coords.shape,))
        if coords.shape[0] == 0:
            raise FormatError("mask has no voxels")
        if coords.min(initial=0) < 0 or np.any(coords >= np.asarray(self.dims)):
            raise FormatError("mask coordinate out of bounds for dims %r" % (self.dims,))
        if np.unique(coords, axis=0).shape[0] != coords.shape[0]:
            raise FormatError("duplicate voxel coordinate in mask")
        object.__setattr__(self, "coords", coords)

    @property
    def p(self) -> int:
        return self.coords.shape[0]

    def index_grid(self) -> np.ndarray:
        """Dense (dx, dy, dz) int array mapping coordinate -> column index, -1 off-mask."""
        grid = np.full(self.dims, -1, dtype=np.int64)
        grid[self.coords[:, 0], self.coords[:, 1], self.coords[:, 2]] = np.arange(self.p)
        return grid

    @classmethod
    def full_grid(cls, dims) -> "VoxelMask":
        dims = _as_int_triple(dims)
        xs, ys, zs = np.meshgrid(*(np.arange(d) for d in dims), indexing="ij")
        coords = np.column_stack([xs.ravel(), ys.ravel(), zs.ravel()])
        return cls(dims, coords)


def voxel_index_to_coord(mask: VoxelMask, index: int) -> tuple[int, int, int]:
    """Return the (x, y, z) coordinate of a voxel column index."""
    if not 0 <= index < mask.p:
        raise FormatError("voxel index %d out of range [0, %d)" % (index, mask.p))
    x, y, z = mask.coords[index]
    return int(x), int(y), int(z)


@dataclass(eq=False)
class Dataset:
    """One center's samples-by-voxels matrix with +/-1 labels."""

    center_id: str
    X: np.ndarray  # (n, p) float64
    y: np.ndarray  # (n,) ints in {+1, -1}
    mask: VoxelMask

    def __post_init__(self):
        X = np.ascontiguousarray(np.asarray(self.X, dtype=np.float64))
        y = np.asarray(self.y, dtype=np.int64).ravel()
        if X.ndim != 2:
            raise FormatError("X must be 2-D, got shape %r" % (X.shape,))
        if X.shape[0] == 0:
            raise FormatError("no samples in dataset %r" % (self.center_id,))
        if X.shape[1] != self.mask.p:
            raise FormatError(
                "dimension mismatch: X has %d columns, mask has %d voxels"
                % (X.shape[1], self.mask.p)
            )
        if y.shape[0] != X.shape[0]:
            raise FormatError(
                "dimension mismatch: %d labels for %d samples" % (y.shape[0], X.shape[0])
            )
        if not np.all(np.isin(y, (-1, 1))):
            raise FormatError("invalid label: labels must be +1 or -1")
        if not (np.any(y == 1) and np.any(y == -1)):
            raise FormatError("dataset %r must contain both classes" % (self.center_id,))
        if not np.all(np.isfinite(X)):
            raise FormatError("non-finite entry in data matrix")
        self.X = X
        self.y = y

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


@dataclass(eq=False)
class CenterCollection:
    """Datasets from several centers sharing one voxel mask."""

    datasets: list[Dataset]

    def __post_init__(self):
        if not self.datasets:
            raise FormatError("no datasets in collection")
        ids = [d.center_id for d in self.datasets]
        if len(set(ids)) != len(ids):
            raise FormatError("duplicate center_id in collection")
        ref = self.datasets[0].mask
        for d in self.datasets[1:]:
            if d.mask.dims != ref.dims or not np.array_equal(d.mask.coords, ref.coords):
                raise FormatError("centers must share an identical voxel mask")

    @property
    def mask(self) -> VoxelMask:
        return self.datasets[0].mask

    def __len__(self) -> int:
        return len(self.datasets)

    def __iter__(self):
        return iter(self.datasets)


@dataclass(frozen=True, eq=False)
class ModelWeights:
    """Weight vector and intercept returned by the solvers."""

    w: np.ndarray
    c: float
    converged: bool = True
    iterations: int = 0

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64).ravel()
        if not np.all(np.isfinite(w)) or not np.isfinite(self.c):
            raise FormatError("non-finite model weights")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "c", float(self.c))


@dataclass(frozen=True, eq=False)
class SupportSet:
    """Sorted set of selected voxel column indices."""

    indices: np.ndarray

    def __post_init__(self):
        idx = np.unique(np.asarray(self.indices, dtype=np.int64).ravel())
        if idx.size and idx[0] < 0:
            raise FormatError("negative voxel index in support")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return int(self.indices.size)

    def __contains__(self, index) -> bool:
        return bool(np.isin(int(index), self.indices))

    def intersection(self, other: "SupportSet") -> "SupportSet":
        return SupportSet(np.intersect1d(self.indices, other.indices))


# ---------------------------------------------------------------------------
# file formats


def _read_header(f, magic: str, n_fields: int) -> list[int]:
    """Parse an ASCII header line ``<magic> 1 <int>...`` from a binary stream."""
    raw = f.readline(256)
    try:
        parts = raw.decode("ascii").split()
    except UnicodeDecodeError:
        raise FormatError("malformed header: not ASCII") from None
    if len(parts) != 2 + n_fields or parts[0] != magic or parts[1] != "1":
        raise FormatError(
            "malformed header: expected '%s 1' with %d fields, got %r"
            % (magic, n_fields, raw[:64])
        )
    try:
        return [int(v) for v in parts[2:]]
    except ValueError:
        raise FormatError("malformed header: non-integer field in %r" % raw[:64]) from None


def save_matrix(path: str | os.PathLike, X: np.ndarray) -> None:
    """Write ``RSSMAT 1 <n> <p>`` then n*p little-endian float64, row-major."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise FormatError("matrix must be 2-D")
    n, p = X.shape
    with open(path, "wb") as f:
        f.write(("RSSMAT 1 %d %d\n" % (n, p)).encode("ascii"))
        f.write(np.ascontiguousarray(X).astype("<f8").tobytes())


def load_matrix(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        n, p = _read_header(f, "RSSMAT", 2)
        if n <= 0 or p <= 0:
            raise FormatError("malformed header: nonpositive matrix shape")
        payload = f.read()
    if len(payload) != 8 * n * p:
        raise FormatError(
            "dimension mismatch: expected %d payload bytes, found %d" % (8 * n * p, len(payload))
        )
    return np.frombuffer(payload, dtype="<f8").reshape(n, p).astype(np.float64)


def save_labels(path: str | os.PathLike, y: np.ndarray) -> None:
    y = np.asarray(y, dtype=np.int64).ravel()
    if not np.all(np.isin(y, (-1, 1))):
        raise FormatError("invalid label: labels must be +1 or -1")
    with open(path, "w", encoding="ascii") as f:
        for v in y:
            f.write("%+d\n" % v)


def load_labels(path: str | os.PathLike) -> np.ndarray:
    out = []
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, 1):
            s = line.strip()
            if not s:
                continue
            if s not in ("+1", "-1", "1"):
                raise FormatError("invalid label %r at line %d" % (s, lineno))
            out.append(1 if s in ("+1", "1") else -1)
    if not out:
        raise FormatError("no samples: empty label file")
    return np.asarray(out, dtype=np.int64)


def save_mask(path: str | os.PathLike, mask: VoxelMask) -> None:
    """Write ``RSSMASK 1 <dx> <dy> <dz> <p>`` then one ``x y z`` line per voxel."""
    with open(path, "w", encoding="ascii") as f:
        f.write("RSSMASK 1 %d %d %d %d\n" % (*mask.dims, mask.p))
        for x, y, z in mask.coords:
            f.write("%d %d %d\n" % (x, y, z))


def load_mask(path: str | os.PathLike) -> VoxelMask:
    with open(path, "rb") as f:
        dx, dy, dz, p = _read_header(f, "RSSMASK", 4)
        try:
            coords = np.loadtxt(f, dtype=np.int64, ndmin=2)
        except ValueError:
            raise FormatError("malformed mask record") from None
    if coords.shape != (p, 3):
        raise FormatError(
            "dimension mismatch: mask header says %d voxels, found %r" % (p, coords.shape)
        )
    return VoxelMask((dx, dy, dz), coords)


def save_support(path: str | os.PathLike, support: SupportSet, p: int, magic: str = "RSSSUP") -> None:
    """Write a support-set file: ``<magic> 1 <p>`` then one index per line."""
    if magic not in ("RSSSUP", "RSSGT"):
        raise FormatError("unknown support magic %r" % magic)
    if len(support) and support.indices[-1] >= p:
        raise FormatError("support index %d out of range for p=%d" % (support.indices[-1], p))
    with open(path, "w", encoding="ascii") as f:
        f.write("%s 1 %d\n" % (magic, p))
        for i in support.indices:
            f.write("%d\n" % i)


def load_support(path: str | os.PathLike) -> tuple[SupportSet, int]:
    """Read a support-set file (RSSSUP or RSSGT magic).  Returns (support, p)."""
    with open(path, "rb") as f:
        raw = f.readline(256)
        parts = raw.decode("ascii", errors="replace").split()
        if len(parts) != 3 or parts[0] not in ("RSSSUP", "RSSGT") or parts[1] != "1":
            raise FormatError("malformed header: expected 'RSSSUP 1 <p>', got %r" % raw[:64])
        p = int(parts[2])
        idx = np.loadtxt(f, dtype=np.int64, ndmin=1) if f.peek(1) else np.empty(0, np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= p):
        raise FormatError("support index out of range for p=%d" % p)
    if idx.size != np.unique(idx).size:
        raise FormatError("duplicate index in support file")
    return SupportSet(idx), p


def load_dataset(
    matrix_path: str | os.PathLike,
    labels_path: str | os.PathLike,
    mask_path: str | os.PathLike,
    center_id: str | None = None,
) -> Dataset:
    """Load one center from its matrix/labels/mask triple.

    ``center_id`` defaults to the matrix file's stem.
    """
    X = load_matrix(matrix_path)
    y = load_labels(labels_path)
    mask = load_mask(mask_path)
    if center_id is None:
        center_id = os.path.splitext(os.path.basename(os.fspath(matrix_path)))[0]
    return Dataset(center_id, X, y, mask)


def save_dataset(
    ds: Dataset,
    matrix_path: str | os.PathLike,
    labels_path: str | os.PathLike,
    mask_path: str | os.PathLike,
) -> None:
    save_matrix(matrix_path, ds.X)
    save_labels(labels_path, ds.y)
    save_mask(mask_path, ds.mask)
