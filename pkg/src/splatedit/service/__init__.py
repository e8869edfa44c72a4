"""CLI and HTTP service wrapping the compress/refine pipeline."""

from .bundle import BundleError, load_bundle, save_bundle
from .cli import build_parser, main
from .wire import (camera_from_json, camera_to_json, decode_mask, encode_mask,
                   image_from_b64, image_to_b64, resized_camera)

__all__ = [
    "BundleError", "load_bundle", "save_bundle", "build_parser", "main",
    "camera_from_json", "camera_to_json", "decode_mask", "encode_mask",
    "image_from_b64", "image_to_b64", "resized_camera", "create_app",
]


def create_app(*args, **kwargs):
    from .app import create_app as _create
    return _create(*args, **kwargs)
