"""splatedit: compress 3D Gaussian splat assets into voxel latents and
refine them interactively from 2D edit views."""

__version__ = "0.1.0"
