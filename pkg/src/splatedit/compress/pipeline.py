"""One-time asset preprocessing: splats -> canonical renders -> voxel latents."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..render.raster import RasterConfig, rasterize
from ..splats.model import orbit_cameras
from ..voxels.grid import GridGeometry, voxelize

LATENT_MAGIC = b"SPVL"
K_RULE_VERSION = 1


@dataclass(frozen=True)
class VoxelLatents:
    """K compact latents per occupied voxel, ordered by (cell id, slot)."""

    resolution: int
    bounds_min: np.ndarray   # (3,) float64
    cell_size: np.ndarray    # (3,) float64
    cell_ids: np.ndarray     # (G,) int64, strictly ascending
    k_per_cell: np.ndarray   # (G,) int64
    latents: np.ndarray      # (sum K, D) float32

    def __post_init__(self):
        if np.any(np.diff(self.cell_ids) <= 0):
            raise ValueError("cell ids must be strictly ascending")
        if int(self.k_per_cell.sum()) != len(self.latents):
            raise ValueError("k_per_cell does not sum to the latent count")
        if not np.isfinite(self.latents).all():
            raise ValueError("latents must be finite")

    @property
    def d_model(self):
        return self.latents.shape[1]

    def __len__(self):
        return len(self.latents)

    def cell_of_slot(self):
        return np.repeat(self.cell_ids, self.k_per_cell)

    def geometry(self):
        return GridGeometry(self.resolution, self.bounds_min, self.cell_size)

    def occupancy(self):
        occ = np.zeros(self.resolution ** 3, dtype=bool)
        occ[self.cell_ids] = True
        return occ


def canonical_cameras(scene, n_views=9, width=64, height=64, fx=None,
                      radius_scale=2.6, seed=None):
    """Inward-looking ring around the scene used for all preprocessing.

    `seed` rotates the ring phase so views need not start axis-aligned.
    """
    bmin, bmax = scene.bounds
    center = (bmin + bmax) / 2
    radius = radius_scale * max(float(np.linalg.norm(bmax - bmin)) / 2, 1e-3)
    return orbit_cameras(n_views, center, radius,
                         fx if fx is not None else float(width),
                         width, height, elevations=(0.35,), seed=seed)


def render_canonical_views(scene, cameras, cfg=None):
    cfg = cfg or RasterConfig()
    return np.stack([rasterize(scene, c, cfg).color for c in cameras])


def compress_asset(scene, lrm, compressor, res=16, n_views=9,
                   prune_floor=0.005, cameras=None, cfg=None):
    """Full Stage I: render -> feature model -> voxelize -> compress.

    Returns (VoxelLatents, VoxelGrid, FeatureGaussians) — the grid and the
    pruned feature cloud are kept for ray selection and evaluation.
    """
    h, w = lrm.image_size
    if cameras is None:
        cameras = canonical_cameras(scene, n_views=n_views, width=w, height=h)
    images = render_canonical_views(scene, cameras, cfg=cfg)
    fg = lrm.forward(images, cameras).prune(prune_floor)
    if len(fg) == 0:
        raise ValueError("feature model produced no Gaussians above the floor")
    # grid over the asset box, not the predicted scatter: stray features
    # clip into boundary cells instead of stretching every cell
    cloud = fg.detached_scene()
    grid = voxelize(cloud, fg.detached_features(), res, bounds=scene.bounds)
    lat, cells, k_per_cell, _ = compressor.compress(grid, fg.features, cloud)
    latents = VoxelLatents(
        resolution=grid.resolution, bounds_min=grid.bounds_min,
        cell_size=grid.cell_size, cell_ids=cells.astype(np.int64),
        k_per_cell=k_per_cell, latents=np.asarray(lat.data, np.float32))
    return latents, grid, fg


def save_latents(path, vl):
    with open(path, "wb") as f:
        f.write(LATENT_MAGIC)
        f.write(struct.pack("<III", 1, K_RULE_VERSION, vl.resolution))
        f.write(np.asarray(vl.bounds_min, "<f8").tobytes())
        f.write(np.asarray(vl.cell_size, "<f8").tobytes())
        f.write(struct.pack("<II", vl.d_model, len(vl.cell_ids)))
        slot = 0
        for cid, k in zip(vl.cell_ids, vl.k_per_cell):
            f.write(struct.pack("<II", int(cid), int(k)))
            f.write(np.asarray(vl.latents[slot:slot + k], "<f4").tobytes())
            slot += int(k)


def load_latents(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != LATENT_MAGIC:
        raise ValueError("not a voxel latent file (bad magic)")
    ver, krule, res = struct.unpack_from("<III", raw, 4)
    if ver != 1:
        raise ValueError(f"unsupported latent file version {ver}")
    if krule != K_RULE_VERSION:
        raise ValueError(f"latent file uses K-rule version {krule}, expected {K_RULE_VERSION}")
    off = 16
    bmin = np.frombuffer(raw, "<f8", 3, off).copy(); off += 24
    csize = np.frombuffer(raw, "<f8", 3, off).copy(); off += 24
    d, n_cells = struct.unpack_from("<II", raw, off); off += 8
    cell_ids, ks, lats = [], [], []
    for _ in range(n_cells):
        cid, k = struct.unpack_from("<II", raw, off); off += 8
        lats.append(np.frombuffer(raw, "<f4", k * d, off).reshape(k, d).copy())
        off += 4 * k * d
        cell_ids.append(cid)
        ks.append(k)
    if off != len(raw):
        raise ValueError("trailing bytes in latent file")
    return VoxelLatents(
        resolution=res, bounds_min=bmin, cell_size=csize,
        cell_ids=np.array(cell_ids, np.int64), k_per_cell=np.array(ks, np.int64),
        latents=np.concatenate(lats) if lats else np.empty((0, d), np.float32))
