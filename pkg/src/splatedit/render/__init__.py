from .image_io import (from_uint8, load_f32, load_png, png_bytes,
                       png_to_array, save_f32, save_png, to_uint8)
from .raster import (ProjectedGaussian, RasterConfig, RenderError,
                     RenderOutput, project, rasterize, rasterize_backward,
                     rasterize_scene_tensor, rasterize_tensors, render_views)

__all__ = [
    "RasterConfig", "RenderOutput", "ProjectedGaussian", "RenderError",
    "project", "rasterize", "rasterize_backward", "render_views",
    "rasterize_tensors", "rasterize_scene_tensor",
    "save_png", "load_png", "png_bytes", "png_to_array",
    "save_f32", "load_f32", "to_uint8", "from_uint8",
]
