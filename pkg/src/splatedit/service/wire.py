"""Wire formats shared with the browser client.

Cameras travel as flat JSON ({fx, fy, cx, cy, width, height, world_to_cam:
16 floats row-major}), stroke masks as run-length encodings over row-major
flattened pixels, and images as base64 PNG. Everything here is lossless:
decode(encode(x)) reproduces x exactly.
"""

from __future__ import annotations

import base64

import numpy as np

from ..render.image_io import png_bytes, png_to_array
from ..splats.model import Camera

CAMERA_FIELDS = ("fx", "fy", "cx", "cy", "width", "height")


def camera_to_json(cam):
    out = {k: getattr(cam, k) for k in CAMERA_FIELDS}
    out["world_to_cam"] = [float(v) for v in
                           np.asarray(cam.world_to_cam).reshape(16)]
    return out


def camera_from_json(obj):
    missing = [k for k in CAMERA_FIELDS + ("world_to_cam",) if k not in obj]
    if missing:
        raise ValueError(f"camera json missing fields: {missing}")
    w2c = np.asarray(obj["world_to_cam"], dtype=np.float64)
    if w2c.shape != (16,):
        raise ValueError("world_to_cam must hold exactly 16 floats")
    return Camera(w2c.reshape(4, 4), float(obj["fx"]), float(obj["fy"]),
                  float(obj["cx"]), float(obj["cy"]),
                  int(obj["width"]), int(obj["height"]))


def resized_camera(cam, width, height):
    """Same view frustum at another resolution: intrinsics scale with size."""
    sx, sy = width / cam.width, height / cam.height
    return Camera(cam.world_to_cam, cam.fx * sx, cam.fy * sy,
                  (cam.cx + 0.5) * sx - 0.5, (cam.cy + 0.5) * sy - 0.5,
                  width, height)


def encode_mask(mask):
    """Boolean (H, W) -> {"width", "height", "runs": [start, len, ...]}.

    Runs cover the row-major flattened pixels, starts strictly increasing.
    """
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    flat = m.reshape(-1)
    edges = np.flatnonzero(np.diff(np.concatenate(([False], flat, [False]))))
    starts, stops = edges[0::2], edges[1::2]
    runs = np.empty(2 * len(starts), dtype=np.int64)
    runs[0::2] = starts
    runs[1::2] = stops - starts
    return {"width": int(m.shape[1]), "height": int(m.shape[0]),
            "runs": [int(v) for v in runs]}


def decode_mask(obj):
    for k in ("width", "height", "runs"):
        if k not in obj:
            raise ValueError(f"mask json missing field: {k}")
    w, h = int(obj["width"]), int(obj["height"])
    if w < 1 or h < 1:
        raise ValueError("mask dims must be positive")
    runs = np.asarray(obj["runs"], dtype=np.int64)
    if runs.ndim != 1 or len(runs) % 2:
        raise ValueError("runs must be flat [start, len, ...] pairs")
    flat = np.zeros(h * w, dtype=bool)
    starts, lengths = runs[0::2], runs[1::2]
    if len(starts):
        if np.any(lengths < 1):
            raise ValueError("run lengths must be >= 1")
        stops = starts + lengths
        if starts[0] < 0 or stops[-1] > h * w:
            raise ValueError("run exceeds mask bounds")
        if np.any(starts[1:] < stops[:-1]):
            raise ValueError("runs must be ascending and non-overlapping")
        for s, e in zip(starts, stops):
            flat[s:e] = True
    return flat.reshape(h, w)


def image_to_b64(img):
    return base64.b64encode(png_bytes(img)).decode("ascii")


def image_from_b64(data):
    return png_to_array(base64.b64decode(data))
