from .model import (FeatureGaussians, FeatureLRM, ImageTokens, patchify,
                    pixel_dirs_world)

__all__ = ["FeatureGaussians", "FeatureLRM", "ImageTokens", "patchify",
           "pixel_dirs_world"]
