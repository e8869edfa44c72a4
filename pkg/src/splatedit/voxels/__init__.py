from .grid import (GridGeometry, PackedSequences, PackError, VoxelGrid, pack,
                   point_cells, topk_indices, unpack, voxelize)
from .raycast import RayHitSet, first_hit_cells, first_hit_voxels, pixel_rays

__all__ = [
    "VoxelGrid", "GridGeometry", "PackedSequences", "PackError", "voxelize",
    "topk_indices", "pack", "unpack", "point_cells",
    "RayHitSet", "first_hit_cells", "first_hit_voxels", "pixel_rays",
]
