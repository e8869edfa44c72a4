from .model import (CrossAttnBlock, PackedStack, VoxelCompressor,
                    attribute_vector, group_order)
from .pipeline import (VoxelLatents, canonical_cameras, compress_asset,
                       load_latents, render_canonical_views, save_latents)

__all__ = ["CrossAttnBlock", "PackedStack", "VoxelCompressor",
           "attribute_vector", "group_order", "VoxelLatents",
           "canonical_cameras", "compress_asset", "load_latents",
           "render_canonical_views", "save_latents"]
