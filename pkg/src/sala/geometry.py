"""Spatial preprocessing: voxel-grid subsampling, ball queries, relative
positions, nearest-neighbor upsampling maps and resolution pyramids.

All functions are pure numpy. Positions are float64, features float32.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .autodiff import EmptyNeighborhoodError

__all__ = [
    "PointCloud", "NeighborIndex", "ResolutionLevel", "GeometryError", "DegeneratePyramidError",
    "grid_subsample", "ball_query", "relative_positions", "nn_interpolate_map", "build_pyramid",
    "read_sptc", "write_sptc", "SPTC_MAGIC",
]

BRUTE_FORCE_LIMIT = 256


class GeometryError(ValueError):
    pass


class DegeneratePyramidError(GeometryError):
    pass


@dataclass
class PointCloud:
    positions: np.ndarray
    features: np.ndarray = None  # type: ignore[assignment]
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise GeometryError(f"positions must be (N, 3), got {self.positions.shape}")
        n = self.positions.shape[0]
        if self.features is None:
            self.features = np.zeros((n, 0), dtype=np.float32)
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        if self.features.shape[0] != n:
            raise GeometryError(f"{self.features.shape[0]} feature rows for {n} points")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise GeometryError(f"labels shape {self.labels.shape} for {n} points")
            if n and self.labels.min() < 0:
                raise GeometryError("labels must be non-negative")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def validate(self, num_classes: int | None = None) -> "PointCloud":
        if len(self) < 1:
            raise GeometryError("point cloud is empty")
        if not np.all(np.isfinite(self.positions)):
            raise GeometryError("point positions must be finite")
        if num_classes is not None and self.labels is not None and self.labels.max() >= num_classes:
            raise GeometryError(f"label {int(self.labels.max())} >= class count {num_classes}")
        return self

    def subset(self, idx: np.ndarray) -> "PointCloud":
        return PointCloud(self.positions[idx], self.features[idx],
                          None if self.labels is None else self.labels[idx])


@dataclass
class NeighborIndex:
    """Padded neighbor lists. Padding slots repeat the first neighbor and are masked out."""

    indices: np.ndarray
    mask: np.ndarray
    radius: float

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)


@dataclass
class ResolutionLevel:
    cloud: PointCloud
    grid_size: float
    ball_radius: float
    upsample_map: np.ndarray | None = None
    neighbors: NeighborIndex | None = None
    pool_neighbors: NeighborIndex | None = None
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# voxel grid
# ---------------------------------------------------------------------------


def _cell_keys(cells: np.ndarray) -> np.ndarray:
    """Collapse integer (M, 3) cell coordinates to sortable int64 keys."""
    lo = cells.min(axis=0)
    span = cells.max(axis=0) - lo + 1
    if np.prod(span.astype(np.float64)) >= 2.0 ** 62:
        raise GeometryError("point extent too large for the grid resolution")
    c = cells - lo
    return (c[:, 0] * span[1] + c[:, 1]) * span[2] + c[:, 2]


def grid_subsample(cloud: PointCloud, grid_size: float, origin=(0.0, 0.0, 0.0),
                   num_classes: int | None = None) -> PointCloud:
    """Keep one point per occupied voxel: member barycenter, mean feature and
    majority label (ties to the smaller label id).

    Output rows are ordered by voxel (x-major, then y, then z).
    """
    if not grid_size > 0:
        raise GeometryError(f"grid_size must be positive, got {grid_size}")
    cloud.validate()
    cells = np.floor((cloud.positions - np.asarray(origin, dtype=np.float64)) / grid_size).astype(np.int64)
    keys = _cell_keys(cells)
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = uniq.shape[0]
    pos = np.stack([np.bincount(inverse, weights=cloud.positions[:, a], minlength=m) for a in range(3)], axis=1)
    pos /= counts[:, None]
    feats = np.zeros((m, cloud.features.shape[1]), dtype=np.float64)
    for c in range(cloud.features.shape[1]):
        feats[:, c] = np.bincount(inverse, weights=cloud.features[:, c], minlength=m)
    feats /= counts[:, None]
    labels = None
    if cloud.labels is not None:
        ncls = int(cloud.labels.max()) + 1 if num_classes is None else num_classes
        votes = np.bincount(inverse * ncls + cloud.labels, minlength=m * ncls).reshape(m, ncls)
        labels = votes.argmax(axis=1)
    return PointCloud(pos, feats.astype(np.float32), labels)


# ---------------------------------------------------------------------------
# neighbor search
# ---------------------------------------------------------------------------


def _candidate_pairs(centers: np.ndarray, support: np.ndarray, radius: float):
    """All (center, support) pairs whose grid cells (edge = radius) are adjacent."""
    if len(centers) * len(support) <= BRUTE_FORCE_LIMIT ** 2 or len(support) < BRUTE_FORCE_LIMIT:
        ci = np.repeat(np.arange(len(centers)), len(support))
        si = np.tile(np.arange(len(support)), len(centers))
        return ci, si
    lo = np.minimum(centers.min(axis=0), support.min(axis=0))
    s_cells = np.floor((support - lo) / radius).astype(np.int64)
    c_cells = np.floor((centers - lo) / radius).astype(np.int64)
    span = np.maximum(s_cells.max(axis=0), c_cells.max(axis=0)) + 3
    if np.prod(span.astype(np.float64)) >= 2.0 ** 62:
        raise GeometryError("point extent too large for the query radius")

    def key(c):
        c = c + 1
        return (c[:, 0] * span[1] + c[:, 1]) * span[2] + c[:, 2]

    s_keys = key(s_cells)
    order = np.argsort(s_keys, kind="stable")
    sorted_keys = s_keys[order]
    ci_parts, si_parts = [], []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                k = key(c_cells + np.array([dx, dy, dz]))
                start = np.searchsorted(sorted_keys, k, side="left")
                stop = np.searchsorted(sorted_keys, k, side="right")
                n = stop - start
                tot = int(n.sum())
                if tot == 0:
                    continue
                ci = np.repeat(np.arange(len(centers)), n)
                offs = np.arange(tot) - np.repeat(np.cumsum(n) - n, n)
                ci_parts.append(ci)
                si_parts.append(order[np.repeat(start, n) + offs])
    if not ci_parts:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(ci_parts), np.concatenate(si_parts)


def _sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


def ball_query(centers: PointCloud | np.ndarray, support: PointCloud | np.ndarray, radius: float,
               k_max: int = 32, select: Literal["nearest", "random"] = "nearest",
               rng: np.random.Generator | None = None, self_query: bool | None = None,
               pad_to_k_max: bool = False) -> NeighborIndex:
    """Up to ``k_max`` support points within ``radius`` of each center.

    Candidates are taken nearest-first (ties to the lower index), or uniformly
    at random when ``select="random"``. For a self query the center is always
    the first neighbor. The padded width is the largest neighbor count unless
    ``pad_to_k_max`` is set.
    """
    if not radius > 0:
        raise GeometryError(f"radius must be positive, got {radius}")
    if k_max < 1:
        raise GeometryError(f"k_max must be >= 1, got {k_max}")
    cpos = centers.positions if isinstance(centers, PointCloud) else np.asarray(centers, np.float64)
    spos = support.positions if isinstance(support, PointCloud) else np.asarray(support, np.float64)
    if self_query is None:
        self_query = centers is support
    n = cpos.shape[0]
    ci, si = _candidate_pairs(cpos, spos, radius)
    d2 = _sq_dist(cpos[ci], spos[si])
    keep = d2 <= radius * radius
    ci, si, d2 = ci[keep], si[keep], d2[keep]
    is_self = (ci == si) if self_query else np.zeros(ci.shape, bool)
    if select == "nearest":
        order = np.lexsort((si, d2, ~is_self, ci))
    elif select == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        order = np.lexsort((rng.random(ci.shape[0]), ~is_self, ci))
    else:
        raise GeometryError(f"unknown neighbor selection {select!r}")
    ci, si = ci[order], si[order]
    counts = np.bincount(ci, minlength=n)
    starts = np.cumsum(counts) - counts
    rank = np.arange(ci.shape[0]) - np.repeat(starts, counts)
    take = rank < k_max
    ci, si, rank = ci[take], si[take], rank[take]
    counts = np.minimum(counts, k_max)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        if not self_query:
            raise EmptyNeighborhoodError(int(empty[0]))
        # only reachable with non-finite positions; the center itself is always within range
        ci = np.concatenate([ci, empty])
        si = np.concatenate([si, empty])
        rank = np.concatenate([rank, np.zeros_like(empty)])
        counts[empty] = 1
    width = k_max if pad_to_k_max else int(max(1, counts.max()))
    indices = np.zeros((n, width), dtype=np.int64)
    mask = np.zeros((n, width), dtype=bool)
    indices[ci, rank] = si
    mask[ci, rank] = True
    first = indices[:, :1]
    indices = np.where(mask, indices, first)
    return NeighborIndex(indices, mask, float(radius))


def relative_positions(centers: PointCloud | np.ndarray, support: PointCloud | np.ndarray,
                       nbr: NeighborIndex) -> np.ndarray:
    """(N, k, 3) float32 offsets ``p_neighbor - p_center``; masked slots are zero."""
    cpos = centers.positions if isinstance(centers, PointCloud) else np.asarray(centers, np.float64)
    spos = support.positions if isinstance(support, PointCloud) else np.asarray(support, np.float64)
    if nbr.indices.size and (nbr.indices.min() < 0 or nbr.indices.max() >= spos.shape[0]):
        raise IndexError("neighbor index out of range for support cloud")
    rel = spos[nbr.indices] - cpos[:, None, :]
    rel[~nbr.mask] = 0.0
    return rel.astype(np.float32)


def nn_interpolate_map(fine: PointCloud | np.ndarray, coarse: PointCloud | np.ndarray,
                       start_radius: float | None = None) -> np.ndarray:
    """Index of the nearest coarse point for every fine point (ties to the lower index)."""
    fpos = fine.positions if isinstance(fine, PointCloud) else np.asarray(fine, np.float64)
    cpos = coarse.positions if isinstance(coarse, PointCloud) else np.asarray(coarse, np.float64)
    if cpos.shape[0] == 0:
        raise GeometryError("coarse cloud is empty")
    out = np.full(fpos.shape[0], -1, dtype=np.int64)
    todo = np.arange(fpos.shape[0])
    if start_radius is None:
        extent = float(np.max(cpos.max(axis=0) - cpos.min(axis=0))) if cpos.shape[0] > 1 else 1.0
        start_radius = max(extent / max(cpos.shape[0], 1) ** (1 / 3), 1e-6)
    r = start_radius
    while todo.size:
        ci, si = _candidate_pairs(fpos[todo], cpos, r)
        d2 = _sq_dist(fpos[todo][ci], cpos[si])
        keep = d2 <= r * r
        ci, si, d2 = ci[keep], si[keep], d2[keep]
        if ci.size:
            order = np.lexsort((si, d2, ci))
            ci, si = ci[order], si[order]
            first = np.ones(ci.shape[0], bool)
            first[1:] = ci[1:] != ci[:-1]
            out[todo[ci[first]]] = si[first]
        todo = todo[out[todo] < 0]
        r *= 2.0
    return out


# ---------------------------------------------------------------------------
# pyramid
# ---------------------------------------------------------------------------


def build_pyramid(cloud: PointCloud, base_grid: float, base_radius: float, levels: int,
                  k_max: int = 32, select: Literal["nearest", "random"] = "nearest",
                  rng: np.random.Generator | None = None, origin=(0.0, 0.0, 0.0),
                  with_neighbors: bool = True) -> list[ResolutionLevel]:
    """Grid-subsampled resolutions with grid size and ball radius doubling per level.

    Level 0 is ``cloud`` subsampled at ``base_grid``. Each level except the last
    stores ``upsample_map`` into the next-coarser level. With ``with_neighbors``
    each level also carries its self-query ``neighbors`` and (from level 1 on)
    ``pool_neighbors`` querying its points against the finer level.
    """
    if levels < 1:
        raise GeometryError(f"levels must be >= 1, got {levels}")
    out: list[ResolutionLevel] = []
    current = cloud
    for lvl in range(levels):
        grid = base_grid * 2 ** lvl
        radius = base_radius * 2 ** lvl
        sub = grid_subsample(current, grid, origin=origin)
        if len(sub) == 0:
            raise DegeneratePyramidError(f"level {lvl} has no points")
        out.append(ResolutionLevel(sub, grid, radius))
        current = sub
    for lvl in range(levels - 1):
        out[lvl].upsample_map = nn_interpolate_map(out[lvl].cloud, out[lvl + 1].cloud)
    if with_neighbors:
        for lvl, level in enumerate(out):
            pts = level.cloud.positions
            level.neighbors = ball_query(pts, pts, level.ball_radius, k_max, select, rng, self_query=True)
            if lvl > 0:
                level.pool_neighbors = ball_query(pts, out[lvl - 1].cloud.positions, level.ball_radius,
                                                  k_max, select, rng, self_query=False)
    return out


# ---------------------------------------------------------------------------
# SPTC1 point-cloud files
# ---------------------------------------------------------------------------

SPTC_MAGIC = "SPTC1"


def write_sptc(path: str | os.PathLike, cloud: PointCloud) -> None:
    n = len(cloud)
    d = cloud.features.shape[1]
    has_labels = cloud.labels is not None
    header = f"{SPTC_MAGIC}\npoints {n}\nfeat_dim {d}\nhas_labels {int(has_labels)}\n".encode("ascii")
    rows = np.concatenate([cloud.positions.astype("<f4"), cloud.features.astype("<f4")], axis=1)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())
        if has_labels:
            fh.write(np.ascontiguousarray(cloud.labels, dtype="<u4").tobytes())


def read_sptc(path: str | os.PathLike) -> PointCloud:
    with open(path, "rb") as fh:
        blob = fh.read()
    stream = io.BytesIO(blob)
    lines = [stream.readline().decode("ascii", "replace").strip() for _ in range(4)]
    if lines[0] != SPTC_MAGIC:
        raise GeometryError(f"{path}: not an {SPTC_MAGIC} file")
    fields = {}
    for line in lines[1:]:
        key, _, value = line.partition(" ")
        fields[key] = value
    try:
        n, d, has_labels = int(fields["points"]), int(fields["feat_dim"]), int(fields["has_labels"])
    except (KeyError, ValueError) as exc:
        raise GeometryError(f"{path}: malformed header") from exc
    offset = stream.tell()
    need = 4 * n * (3 + d) + (4 * n if has_labels else 0)
    if len(blob) - offset != need:
        raise GeometryError(f"{path}: expected {need} payload bytes, found {len(blob) - offset}")
    rows = np.frombuffer(blob, dtype="<f4", count=n * (3 + d), offset=offset).reshape(n, 3 + d)
    labels = None
    if has_labels:
        labels = np.frombuffer(blob, dtype="<u4", count=n, offset=offset + 4 * n * (3 + d)).astype(np.int64)
    return PointCloud(rows[:, :3].astype(np.float64), rows[:, 3:].astype(np.float32), labels)
