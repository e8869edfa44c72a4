"""First-hit voxel selection by incremental grid traversal.

Rays (one per selected pixel) march through the grid AABB cell by cell;
each records the first occupied cell it enters. All rays advance in
lockstep as numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RayHitSet:
    cells: frozenset

    def __contains__(self, cid):
        return cid in self.cells

    def __iter__(self):
        return iter(self.cells)

    def __len__(self):
        return len(self.cells)


def pixel_rays(cam, mask=None, stride=4):
    """World-space rays for masked pixels (or the full grid, strided)."""
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (cam.height, cam.width):
            raise ValueError(f"mask shape {mask.shape} != image {cam.height, cam.width}")
        ys, xs = np.nonzero(mask)
    else:
        ys, xs = np.mgrid[0:cam.height:stride, 0:cam.width:stride]
        ys, xs = ys.reshape(-1), xs.reshape(-1)
    d_cam = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy,
                      np.ones_like(xs, dtype=np.float64)], axis=1)
    d_world = d_cam @ cam.R  # R^T applied rowwise
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origin = cam.cam_position()
    return origin, d_world


def first_hit_voxels(grid, cam, mask=None, stride=4, opacity_floor=0.01):
    """Union of first occupied cells along the selected pixels' rays.

    Occupancy requires at least one Gaussian with decoded opacity above
    `opacity_floor`, so near-empty ghost cells are never selected.
    """
    occ = grid.occupancy_mask(opacity_floor=opacity_floor)
    return first_hit_cells(grid, occ, cam, mask=mask, stride=stride)


def first_hit_cells(geom, occ, cam, mask=None, stride=4):
    """first_hit_voxels against an explicit occupancy vector.

    `geom` needs only resolution / bounds_min / cell_size; latent-grid
    callers pass a GridGeometry when no VoxelGrid is around.
    """
    origin, dirs = pixel_rays(cam, mask, stride)
    return RayHitSet(frozenset(_march(geom, occ, origin, dirs)))


def _march(grid, occ, origin, dirs):
    res = grid.resolution
    bmin = grid.bounds_min
    h = grid.cell_size
    bmax = grid.bounds_max
    r = len(dirs)
    if r == 0:
        return []

    # slab test for AABB entry
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (bmin[None] - origin[None]) / dirs
        t1 = (bmax[None] - origin[None]) / dirs
    tlo = np.minimum(t0, t1)
    thi = np.maximum(t0, t1)
    parallel = np.abs(dirs) < 1e-15
    inside = (origin[None] >= bmin) & (origin[None] <= bmax)
    tlo = np.where(parallel, np.where(inside, -np.inf, np.inf), tlo)
    thi = np.where(parallel, np.where(inside, np.inf, -np.inf), thi)
    tenter = np.max(tlo, axis=1)
    texit = np.min(thi, axis=1)
    alive = (tenter <= texit) & (texit >= 0)
    # dead rays keep a finite dummy start so the vectorized cell math below
    # stays warning-free; `alive` masks them out of every lookup
    tstart = np.where(alive, np.maximum(tenter, 0.0), 0.0)

    # nudge inside so the start cell is unambiguous
    p = origin[None] + (tstart + 1e-12)[:, None] * dirs
    cell = np.clip(np.floor((p - bmin) / h), 0, res - 1).astype(np.int64)

    step = np.sign(dirs).astype(np.int64)
    with np.errstate(divide="ignore"):
        tdelta = np.abs(h[None] / dirs)
    next_b = bmin + (cell + (step > 0)) * h
    with np.errstate(divide="ignore", invalid="ignore"):
        tmax = (next_b - origin[None]) / dirs
    tmax = np.where(parallel, np.inf, tmax)
    tdelta = np.where(parallel, np.inf, tdelta)

    hits = set()
    lin = lambda c: c[:, 0] + res * (c[:, 1] + res * c[:, 2])
    for _ in range(3 * res + 2):
        if not alive.any():
            break
        ids = lin(cell[alive])
        hit_now = occ[ids]
        if hit_now.any():
            hits.update(int(c) for c in ids[hit_now])
            live_idx = np.nonzero(alive)[0]
            alive[live_idx[hit_now]] = False
        if not alive.any():
            break
        axis = np.argmin(tmax, axis=1)
        rows = np.arange(r)
        adv = alive
        cell[adv, axis[adv]] += step[adv, axis[adv]]
        tmax[adv, axis[adv]] += tdelta[adv, axis[adv]]
        oob = (cell < 0).any(axis=1) | (cell >= res).any(axis=1)
        alive &= ~oob
        del rows
    return hits
