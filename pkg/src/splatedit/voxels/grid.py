"""Voxelization of a feature-tagged splat cloud into variable-length groups.

Cells partition the scene AABB; a Gaussian belongs to exactly one cell by
its center: xyz = clamp(floor((p - min) / cell_size), 0, res - 1),
cell id = x + res * (y + res * z). Groups keep ascending Gaussian index.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


class PackError(ValueError):
    pass


@dataclass(frozen=True)
class PackedSequences:
    """Variable-length groups flattened into one token buffer."""

    flat: np.ndarray       # (total, D)
    offsets: np.ndarray    # (G,) int64, strictly increasing
    lengths: np.ndarray    # (G,) int64

    def __post_init__(self):
        if len(self.offsets) != len(self.lengths):
            raise PackError("offsets and lengths disagree in count")
        if int(self.lengths.sum()) != len(self.flat):
            raise PackError("lengths do not sum to the flat token count")
        if len(self.offsets):
            starts = np.concatenate([[0], np.cumsum(self.lengths)[:-1]])
            if not np.array_equal(self.offsets, starts):
                raise PackError("offsets are not the prefix sums of lengths")

    def group(self, i):
        o, l = int(self.offsets[i]), int(self.lengths[i])
        return self.flat[o:o + l]


class _CellMath:
    """Linear-id arithmetic shared by full grids and bare geometries."""

    @property
    def bounds_max(self):
        return self.bounds_min + self.cell_size * self.resolution

    def cell_xyz(self, cell_ids):
        cell_ids = np.asarray(cell_ids, dtype=np.int64)
        r = self.resolution
        return np.stack([cell_ids % r, (cell_ids // r) % r, cell_ids // (r * r)], axis=-1)

    def cell_id(self, xyz):
        xyz = np.asarray(xyz, dtype=np.int64)
        r = self.resolution
        return xyz[..., 0] + r * (xyz[..., 1] + r * xyz[..., 2])

    def cell_center(self, cell_ids):
        return self.bounds_min + (self.cell_xyz(cell_ids) + 0.5) * self.cell_size


@dataclass(frozen=True)
class GridGeometry(_CellMath):
    """Just the lattice: enough to place cells and march rays, no contents."""

    resolution: int
    bounds_min: np.ndarray
    cell_size: np.ndarray


class VoxelGrid(_CellMath):
    """Immutable partition of Gaussians into res^3 cells.

    `groups` maps occupied linear cell id -> ascending Gaussian indices.
    Per-Gaussian features and decoded opacities ride along for the
    compressor and ray selection.
    """

    def __init__(self, resolution, bounds_min, cell_size, cell_of, groups,
                 features=None, opacities=None):
        self.resolution = int(resolution)
        self.bounds_min = np.asarray(bounds_min, dtype=np.float64)
        self.cell_size = np.asarray(cell_size, dtype=np.float64)
        self.cell_of = np.asarray(cell_of, dtype=np.int64)
        self.groups = dict(groups)
        self.features = features
        self.opacities = None if opacities is None else np.asarray(opacities, np.float64)
        total = sum(len(v) for v in self.groups.values())
        if total != len(self.cell_of):
            raise ValueError(f"groups cover {total} of {len(self.cell_of)} gaussians")
        seen = np.concatenate([np.asarray(v) for v in self.groups.values()]) \
            if self.groups else np.empty(0, np.int64)
        if len(np.unique(seen)) != len(seen):
            raise ValueError("groups overlap: not a partition")

    def occupied_cells(self):
        return np.fromiter(self.groups.keys(), dtype=np.int64, count=len(self.groups))

    def occupancy_mask(self, opacity_floor=None):
        """Boolean res^3 array; optionally requires a max decoded opacity."""
        occ = np.zeros(self.resolution ** 3, dtype=bool)
        for cid, idx in self.groups.items():
            if opacity_floor is not None and self.opacities is not None:
                if self.opacities[idx].max() <= opacity_floor:
                    continue
            occ[cid] = True
        return occ


def point_cells(points, bounds_min, cell_size, res):
    ix = np.floor((np.asarray(points, np.float64) - bounds_min) / cell_size)
    ix = np.clip(ix, 0, res - 1).astype(np.int64)
    return ix[:, 0] + res * (ix[:, 1] + res * ix[:, 2])


def voxelize(scene, features, res, bounds=None):
    """Partition `scene` into a VoxelGrid; features align by Gaussian index.

    `bounds` overrides the grid box (e.g. the source asset's box); positions
    outside it clip into boundary cells.
    """
    n = len(scene)
    if features is not None and len(features) != n:
        raise ValueError(f"features length {len(features)} != gaussian count {n}")
    if bounds is None:
        bounds = scene.bounds
    bmin = np.asarray(bounds[0], np.float64)
    bmax = np.asarray(bounds[1], np.float64)
    extent = bmax - bmin
    degenerate = extent <= 0
    if np.any(degenerate):
        warnings.warn("degenerate scene bounds; expanding zero-extent axes")
        extent = np.where(degenerate, 1e-6, extent)
    cell_size = extent / res
    cell_of = point_cells(scene.positions, bmin, cell_size, res) if n else np.empty(0, np.int64)

    order = np.argsort(cell_of, kind="stable")  # stable: ascending index inside cells
    sorted_cells = cell_of[order]
    groups = {}
    if n:
        starts = np.flatnonzero(np.concatenate([[True], sorted_cells[1:] != sorted_cells[:-1]]))
        ends = np.concatenate([starts[1:], [n]])
        for s, e in zip(starts, ends):
            groups[int(sorted_cells[s])] = np.sort(order[s:e])
    return VoxelGrid(res, bmin, cell_size, cell_of, groups,
                     features=features, opacities=scene.opacities())


def topk_indices(group, opacities, fraction=0.25):
    """Highest-opacity subset of a voxel group: K = max(floor(f*N), 1).

    Ties break toward the smaller Gaussian index; result is ordered by
    (-opacity, index).
    """
    group = np.asarray(group, dtype=np.int64)
    if len(group) == 0:
        raise ValueError("topk_indices needs a non-empty group")
    k = max(int(np.floor(fraction * len(group))), 1)
    ops = np.asarray(opacities, dtype=np.float64)[group]
    order = np.lexsort((group, -ops))
    return group[order[:k]]


def pack(groups, tokens):
    """Flatten per-group token lists; inverse of unpack."""
    groups = [np.asarray(g, dtype=np.int64) for g in groups]
    lengths = np.array([len(g) for g in groups], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]]) if groups \
        else np.empty(0, np.int64)
    tokens = np.asarray(tokens)
    flat = tokens[np.concatenate(groups)] if groups else tokens[:0]
    return PackedSequences(flat=flat, offsets=offsets.astype(np.int64), lengths=lengths)


def unpack(packed):
    return [packed.group(i) for i in range(len(packed.lengths))]
