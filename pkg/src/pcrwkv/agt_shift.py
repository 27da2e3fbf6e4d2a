"""Geometric token shift on point sets.

Space is cut into cubic cells of side ``h``. Every point in a cell receives the
same aggregate: a softmax-weighted average of the cell's features, where each
member's weight is ``exp(-|x_j - centroid|)`` normalised over the cell. The
aggregate is blended into the first ``C'`` channels; the rest pass through.

The KNN shift variants are brute-force comparators used for ablations only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import KTooLarge, NonFiniteCoordinate, ShapeMismatch
from .numerics import ag
from .numerics.autograd import Node

_BITS = 21
_BIAS = 1 << (_BITS - 1)
_MASK = (1 << _BITS) - 1

KNN_STRATEGIES = ("RandOne", "Avg", "WAvg")


@dataclass(frozen=True)
class AgtConfig:
    h: float = 0.2
    lam: float = 0.5
    c_prime: int | None = None  # None means half the channels

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"cell size must be positive, got {self.h}")
        if not 0 < self.lam < 1:
            raise ValueError(f"lambda must lie in (0, 1), got {self.lam}")
        if self.c_prime is not None and self.c_prime <= 0:
            raise ValueError("c_prime must be positive")

    def channels(self, C: int) -> int:
        cp = C // 2 if self.c_prime is None else self.c_prime
        if not 0 < cp <= C:
            raise ValueError(f"c_prime={cp} invalid for {C} channels")
        return cp


@dataclass
class GridIndex:
    h: float
    keys: np.ndarray  # (N,) packed 64-bit cell key per point
    cell_of: np.ndarray  # (N,) dense cell number per point, numbered by first appearance
    cell_keys: np.ndarray  # (n_cells,) packed key per dense cell number
    counts: np.ndarray  # (n_cells,)
    centroids: np.ndarray  # (n_cells, 3)
    _buckets: dict | None = field(default=None, repr=False)

    @property
    def n_cells(self) -> int:
        return len(self.cell_keys)

    @property
    def buckets(self) -> dict[int, list[int]]:
        """Packed cell key -> member point indices, in ascending index order."""
        if self._buckets is None:
            out: dict[int, list[int]] = {int(k): [] for k in self.cell_keys}
            for i, key in enumerate(self.keys.tolist()):
                out[key].append(i)
            self._buckets = out
        return self._buckets


def cell_coords(coords: np.ndarray, h: float) -> np.ndarray:
    return np.floor(np.asarray(coords, dtype=float) / h).astype(np.int64)


def pack_key(ijk: np.ndarray) -> np.ndarray:
    """21 bits per signed axis; exact while every |cell coordinate| < 2**20."""
    ijk = np.asarray(ijk, dtype=np.int64) + _BIAS
    return ((ijk[..., 0] & _MASK) << (2 * _BITS)) | ((ijk[..., 1] & _MASK) << _BITS) | (ijk[..., 2] & _MASK)


def unpack_key(key) -> tuple[int, int, int]:
    key = int(key)
    return (
        ((key >> (2 * _BITS)) & _MASK) - _BIAS,
        ((key >> _BITS) & _MASK) - _BIAS,
        (key & _MASK) - _BIAS,
    )


def build_grid(coords, h: float) -> GridIndex:
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ShapeMismatch(f"coords must be (N, 3), got {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise NonFiniteCoordinate("coordinates contain NaN or Inf")
    if not h > 0:
        raise ValueError(f"cell size must be positive, got {h}")
    keys = pack_key(cell_coords(coords, h))
    table: dict[int, int] = {}
    cell_of = np.fromiter(
        (table.setdefault(k, len(table)) for k in keys.tolist()), dtype=np.int64, count=len(keys)
    )
    n_cells = len(table)
    counts = np.bincount(cell_of, minlength=n_cells)
    centroids = np.stack(
        [np.bincount(cell_of, weights=coords[:, d], minlength=n_cells) for d in range(3)], axis=1
    ) / counts[:, None]
    return GridIndex(
        h=h,
        keys=keys,
        cell_of=cell_of,
        cell_keys=np.fromiter(table.keys(), dtype=np.int64, count=n_cells),
        counts=counts,
        centroids=centroids,
    )


def agt_weights(grid: GridIndex, coords) -> np.ndarray:
    """Weight of each point inside its own cell; weights of one cell sum to 1."""
    coords = np.asarray(coords, dtype=float)
    dist = np.linalg.norm(coords - grid.centroids[grid.cell_of], axis=1)
    nearest = np.full(grid.n_cells, np.inf)
    np.minimum.at(nearest, grid.cell_of, dist)
    e = np.exp(-(dist - nearest[grid.cell_of]))
    total = np.bincount(grid.cell_of, weights=e, minlength=grid.n_cells)
    return e / total[grid.cell_of]


def cell_weight_lists(grid: GridIndex, weights: np.ndarray) -> dict[int, list[float]]:
    """Weights grouped per packed cell key, members in ascending index order."""
    return {key: [float(weights[i]) for i in members] for key, members in grid.buckets.items()}


@dataclass
class ShiftOperator:
    """Sparse aggregation ``hat = gather(P @ F)`` over a flattened batch of clouds."""

    pool: sp.csr_matrix  # (total_cells, total_points)
    cell_of: np.ndarray  # (total_points,) global cell number

    def aggregate(self, F2d: Node) -> Node:
        return ag.take(ag.spmm(self.pool, F2d), self.cell_of, axis=0)


def agt_operator(coords, h: float) -> ShiftOperator:
    """Operator for one cloud (N, 3) or a batch (B, N, 3) flattened in row-major order."""
    coords = np.asarray(coords, dtype=float)
    clouds = coords[None] if coords.ndim == 2 else coords
    rows, cols, vals, cells = [], [], [], []
    offset_pts = offset_cells = 0
    for cloud in clouds:
        grid = build_grid(cloud, h)
        w = agt_weights(grid, cloud)
        n = len(cloud)
        rows.append(grid.cell_of + offset_cells)
        cols.append(np.arange(n) + offset_pts)
        vals.append(w)
        cells.append(grid.cell_of + offset_cells)
        offset_pts += n
        offset_cells += grid.n_cells
    pool = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(offset_cells, offset_pts),
    )
    return ShiftOperator(pool=pool, cell_of=np.concatenate(cells))


def _fuse(F: Node, hat_first: Node, lam: float, cp: int) -> Node:
    """[lam * f[:C'] + (1 - lam) * hat[:C'] || f[C':]]"""
    head = ag.index(F, (Ellipsis, slice(0, cp)))
    mixed = lam * head + (1.0 - lam) * hat_first
    if cp == F.shape[-1]:
        return mixed
    return ag.concat([mixed, ag.index(F, (Ellipsis, slice(cp, None)))], axis=-1)


def apply_operator(F, op: ShiftOperator, lam: float, cp: int) -> Node:
    """Blend the operator's aggregate into the first ``cp`` channels of F (N, C) or (B, N, C)."""
    F = ag.const(F)
    shape = F.shape
    flat = ag.reshape(F, (-1, shape[-1]))
    if flat.shape[0] != len(op.cell_of):
        raise ShapeMismatch(f"features {shape} do not match {len(op.cell_of)} points")
    hat = op.aggregate(ag.index(flat, (slice(None), slice(0, cp))))
    hat = ag.reshape(hat, shape[:-1] + (cp,))
    return _fuse(F, hat, lam, cp)


def agt_shift(F, coords, cfg: AgtConfig = AgtConfig()) -> Node:
    F = ag.const(F)
    coords = np.asarray(coords, dtype=float)
    if F.shape[:-1] != coords.shape[:-1]:
        raise ShapeMismatch(f"features {F.shape} and coords {coords.shape} disagree")
    return apply_operator(F, agt_operator(coords, cfg.h), cfg.lam, cfg.channels(F.shape[-1]))


def agt_op_count(grid: GridIndex, channels: int) -> int:
    """Primitive operations of build_grid + agt_shift: per point hashing, centroid,
    distance and weight work, plus per-channel pooling and gather."""
    n = len(grid.keys)
    return 4 * n + 3 * n + 2 * n + 2 * n * channels + grid.n_cells * channels


# --------------------------------------------------------------- KNN comparators


def knn_indices(coords: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact k nearest other points by full pairwise distances; ties by lower index."""
    coords = np.asarray(coords, dtype=float)
    n = len(coords)
    if not 1 <= k < n:
        raise KTooLarge(f"k={k} must satisfy 1 <= k < N={n}")
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    np.fill_diagonal(dist, np.inf)
    idx = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(dist, idx, axis=1)


def knn_weights(dist: np.ndarray, strategy: str, rng: np.random.Generator | None) -> np.ndarray:
    n, k = dist.shape
    if strategy == "Avg":
        return np.full((n, k), 1.0 / k)
    if strategy == "WAvg":
        e = np.exp(-(dist - dist.min(axis=1, keepdims=True)))
        return e / e.sum(axis=1, keepdims=True)
    if strategy == "RandOne":
        if rng is None:
            raise ValueError("RandOne needs an rng")
        w = np.zeros((n, k))
        w[np.arange(n), rng.integers(0, k, size=n)] = 1.0
        return w
    raise ValueError(f"unknown KNN strategy {strategy!r}")


def knn_operator(coords, k: int, strategy: str, rng=None) -> ShiftOperator:
    coords = np.asarray(coords, dtype=float)
    clouds = coords[None] if coords.ndim == 2 else coords
    rows, cols, vals = [], [], []
    off = 0
    for cloud in clouds:
        idx, dist = knn_indices(cloud, k)
        w = knn_weights(dist, strategy, rng)
        n = len(cloud)
        rows.append(np.repeat(np.arange(n), k) + off)
        cols.append(idx.reshape(-1) + off)
        vals.append(w.reshape(-1))
        off += n
    # one "cell" per query point
    pool = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(off, off)
    )
    return ShiftOperator(pool=pool, cell_of=np.arange(off))


def knn_shift(F, coords, k: int, strategy: str, rng=None, cfg: AgtConfig = AgtConfig()) -> Node:
    F = ag.const(F)
    coords = np.asarray(coords, dtype=float)
    if F.shape[:-1] != coords.shape[:-1]:
        raise ShapeMismatch(f"features {F.shape} and coords {coords.shape} disagree")
    op = knn_operator(coords, k, strategy, rng)
    return apply_operator(F, op, cfg.lam, cfg.channels(F.shape[-1]))
